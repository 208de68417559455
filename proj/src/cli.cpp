#include "mclfir/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mclfir/dataset.hpp"
#include "mclfir/evaluate.hpp"
#include "mclfir/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mclfir::cli {

namespace {

const std::vector<std::string> kFactorNames = {"body-length", "stripe-pattern", "base-color",
                                               "corner-shape", "bar-width", "tone-level"};

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(csv);
  while (std::getline(ss, field, ','))
    if (!field.empty()) out.push_back(field);
  return out;
}

data::Dataset load_merged(const std::vector<std::string>& paths) {
  if (paths.empty()) throw std::runtime_error("no dataset given (--data)");
  std::vector<data::Dataset> sets;
  sets.reserve(paths.size());
  for (const auto& p : paths) {
    fs::path mp(p);
    if (fs::is_directory(mp)) mp /= "manifest.jsonl";
    sets.push_back(data::load_manifest(mp.string()));
  }
  return data::merge_datasets(sets);
}

std::vector<data::Dataset> load_each(const std::vector<std::string>& paths) {
  std::vector<data::Dataset> sets;
  for (const auto& p : paths) {
    fs::path mp(p);
    if (fs::is_directory(mp)) mp /= "manifest.jsonl";
    sets.push_back(data::load_manifest(mp.string()));
  }
  return sets;
}

int detect_image_size(const data::Dataset& ds) {
  if (ds.items.empty()) throw std::runtime_error("dataset has no items");
  const int size = ds.items.front().image.height;
  for (const auto& item : ds.items)
    if (item.image.height != size || item.image.width != size)
      throw std::runtime_error("dataset images must all be square and equally sized");
  return size;
}

struct TrainFlags {
  std::vector<std::string> data;
  std::string out;
  std::string method = "mclfir";
  std::string order;
  int epochs = 3;
  int doublets = 500;
  int batch = 16;
  double lambda_kd = 1e-4;
  double beta = 0.999;
  double tau = 0.3;
  double margin = 0.2;
  double lr = 1e-4;
  int replay_capacity = 2000;
  double distort_strength = 0.2;
  double distort_prob = 1.0;
  int text_dim = 512;
  uint64_t seed = 0;
};

std::string resolve_out_dir(const TrainFlags& f) {
  if (!f.out.empty()) return f.out;
  const char* root = std::getenv("MCLFIR_OUT_ROOT");
  if (root == nullptr || *root == '\0')
    throw std::runtime_error("no output directory: pass --out or set MCLFIR_OUT_ROOT");
  return (fs::path(root) / (f.method + "-s" + std::to_string(f.seed))).string();
}

int cmd_train(const TrainFlags& f, CLI::App* sub) {
  const std::string out_dir = resolve_out_dir(f);
  if (fs::exists(fs::path(out_dir) / "config.txt"))
    throw std::runtime_error("refusing to overwrite existing run at " + out_dir);
  fs::create_directories(out_dir);

  const auto sets = load_each(f.data);
  const data::Dataset merged = data::merge_datasets(sets);
  std::vector<std::string> order = split_list(f.order);
  if (order.empty())
    for (const auto& a : merged.attributes) order.push_back(a.name);

  trainer::MethodConfig cfg;
  cfg.method = trainer::parse_method(f.method);
  cfg.hyper.tau = f.tau;
  cfg.hyper.lambda_kd = f.lambda_kd;
  cfg.hyper.margin = f.margin;
  cfg.hyper.beta = f.beta;
  cfg.hyper.batch = f.batch;
  cfg.epochs = f.epochs;
  cfg.replay_capacity = f.replay_capacity;
  cfg.learning_rate = f.lr;
  cfg.distort.strength = f.distort_strength;
  cfg.distort.apply_prob = f.distort_prob;
  cfg.encoder_cfg.image_size = detect_image_size(merged);
  cfg.text_dim = f.text_dim;
  cfg.validate();

  const auto sequence =
      data::build_task_sequence(sets, order, f.doublets, mix_seed(f.seed, fnv1a64("sampling")));
  const textemb::Provider text(f.text_dim);
  const auto history = trainer::train_sequence(merged, sequence, cfg, text, f.seed);

  // Run directory: resolved config, loss trace, one checkpoint per task and
  // a manifest tying them together.
  std::ofstream cfg_out(fs::path(out_dir) / "config.txt");
  cfg_out << sub->config_to_str(true, false);
  cfg_out.close();

  trainer::write_loss_csv(history, (fs::path(out_dir) / "loss.csv").string());

  json manifest;
  manifest["method"] = f.method;
  manifest["seed"] = f.seed;
  manifest["order"] = order;
  manifest["data"] = f.data;
  manifest["batch"] = f.batch;
  manifest["text_dim"] = f.text_dim;
  manifest["image_size"] = cfg.encoder_cfg.image_size;
  manifest["losses_csv"] = "loss.csv";
  manifest["tasks"] = json::array();
  for (const auto& task : history.tasks) {
    const std::string name = "task_" + std::to_string(task.index) + ".ckpt";
    save_checkpoint(task.snapshot, (fs::path(out_dir) / name).string());
    manifest["tasks"].push_back({{"index", task.index},
                                 {"attribute", task.attribute},
                                 {"steps", task.steps},
                                 {"checkpoint", name}});
  }
  save_checkpoint(history.final_state(), (fs::path(out_dir) / "final.ckpt").string());
  manifest["final_checkpoint"] = "final.ckpt";
  std::ofstream hist_out(fs::path(out_dir) / "history.json");
  hist_out << manifest.dump(2) << "\n";

  std::cout << "trained " << history.tasks.size() << " tasks (" << f.method << ", seed " << f.seed
            << "), " << history.optimizer_steps << " steps, " << history.student_images
            << " student images -> " << out_dir << "\n";
  return 0;
}

/// Rebuilds just enough history from a run directory to evaluate it.
trainer::TrainHistory load_run_history(const std::string& run_dir, json& manifest) {
  std::ifstream in(fs::path(run_dir) / "history.json");
  if (!in) throw std::runtime_error("no history.json under " + run_dir);
  in >> manifest;
  trainer::TrainHistory history;
  history.method = trainer::parse_method(manifest["method"].get<std::string>());
  history.seed = manifest.value("seed", 0ULL);
  for (const auto& t : manifest["tasks"]) {
    trainer::TaskRecord record;
    record.index = t["index"].get<int>();
    record.attribute = t["attribute"].get<std::string>();
    record.steps = t.value("steps", 0);
    const auto ckpt = fs::path(run_dir) / t["checkpoint"].get<std::string>();
    if (!fs::exists(ckpt)) throw std::runtime_error("missing snapshot " + ckpt.string());
    record.snapshot = load_checkpoint(ckpt.string());
    history.tasks.push_back(std::move(record));
  }
  if (history.tasks.empty()) throw std::runtime_error("run has no task snapshots");
  return history;
}

int cmd_eval(const std::string& run_dir, const std::vector<std::string>& data_paths,
             const std::string& export_items, const std::string& out_dir_flag) {
  json manifest;
  const auto history = load_run_history(run_dir, manifest);
  const data::Dataset merged = load_merged(data_paths);
  const textemb::Provider text(manifest.value("text_dim", 512));

  const auto report = eval::forgetting_report(history, merged, text);
  const std::string out_dir = out_dir_flag.empty() ? run_dir : out_dir_flag;
  fs::create_directories(out_dir);
  eval::write_report_csv(report, (fs::path(out_dir) / "report.csv").string());
  const std::string table = eval::render_report_table(report);
  std::ofstream table_out(fs::path(out_dir) / "report.txt");
  table_out << table;
  std::cout << table;

  if (!export_items.empty()) {
    auto model = eval::ModelSnapshot::from_state(history.final_state());
    const std::string override_name =
        history.method == trainer::Method::er ? trainer::kSharedHeadName : "";
    for (const auto& id : split_list(export_items)) {
      const data::Item& item = merged.item(id);
      for (const auto& task : history.tasks) {
        const std::string path =
            (fs::path(out_dir) / ("attn_" + id + "_" + task.attribute + ".png")).string();
        eval::export_attention_map(model, item.image, task.attribute, text, path, override_name);
      }
    }
  }
  return 0;
}

void hsv_palette(size_t i, size_t n, double& r, double& g, double& b) {
  const double h = (static_cast<double>(i) + 0.3) / std::max<size_t>(1, n);
  const double v = 0.85, s = 0.65;
  const double hh = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1, double r, double g, double b) {
  for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
}

/// Grouped bars of final (A) mAP per attribute per run, plus a trailing
/// mean-forgetting group. Series colors follow run order; numbers live in
/// comparison.csv.
void write_compare_plot(const std::string& path,
                        const std::vector<eval::RetrievalReport>& reports) {
  const size_t runs = reports.size();
  const size_t attrs = reports.front().rows.size();
  const int bar_w = 10, bar_gap = 2, group_gap = 14, margin = 24;
  const int group_w = static_cast<int>(runs) * (bar_w + bar_gap) + group_gap;
  const int width = 2 * margin + static_cast<int>(attrs + 1) * group_w;
  const int height = 260;
  const int base_y = height - 30, plot_h = 200;

  Image img(height, width);
  fill_rect(img, 0, 0, width, height, 1.0, 1.0, 1.0);
  fill_rect(img, margin - 4, base_y, width - margin + 4, base_y + 2, 0.2, 0.2, 0.2);

  for (size_t a = 0; a <= attrs; ++a) {
    const int gx = margin + static_cast<int>(a) * group_w;
    for (size_t r = 0; r < runs; ++r) {
      double value;
      if (a < attrs) {
        value = reports[r].rows[a].a_map;
      } else {
        value = std::max(0.0, reports[r].mean_forgetting);  // trailing summary group
      }
      const int h = static_cast<int>(std::lround(value / 100.0 * plot_h));
      double cr, cg, cb;
      hsv_palette(r, runs, cr, cg, cb);
      const int x0 = gx + static_cast<int>(r) * (bar_w + bar_gap);
      fill_rect(img, x0, base_y - h, x0 + bar_w, base_y, cr, cg, cb);
    }
  }
  write_png(path, img);
}

int cmd_compare(const std::vector<std::string>& runs, const std::vector<std::string>& data_paths,
                const std::string& out_dir) {
  if (runs.size() < 2) throw std::runtime_error("compare needs at least two --runs");
  fs::create_directories(out_dir);

  std::vector<eval::RetrievalReport> reports;
  std::vector<json> manifests;
  for (const auto& run : runs) {
    json manifest;
    const auto history = load_run_history(run, manifest);
    manifests.push_back(manifest);
    const fs::path existing = fs::path(run) / "report.csv";
    if (fs::exists(existing)) {
      reports.push_back(eval::read_report_csv(existing.string()));
    } else {
      const data::Dataset merged = load_merged(data_paths);
      const textemb::Provider text(manifest.value("text_dim", 512));
      reports.push_back(eval::forgetting_report(history, merged, text));
    }
  }

  // All runs must cover the same attribute set.
  std::vector<std::string> base;
  for (const auto& row : reports.front().rows) base.push_back(row.attribute);
  auto sorted_base = base;
  std::sort(sorted_base.begin(), sorted_base.end());
  for (const auto& rep : reports) {
    std::vector<std::string> names;
    for (const auto& row : rep.rows) names.push_back(row.attribute);
    std::sort(names.begin(), names.end());
    if (names != sorted_base)
      throw std::runtime_error("compare: runs cover different attribute sets");
  }

  std::ofstream csv(fs::path(out_dir) / "comparison.csv");
  csv << "run,method,images_per_step,mean_B,mean_A,mean_forgetting\n";
  for (size_t i = 0; i < runs.size(); ++i) {
    trainer::MethodConfig cfg;
    cfg.method = trainer::parse_method(manifests[i]["method"].get<std::string>());
    cfg.hyper.batch = manifests[i].value("batch", 32);
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%lld,%.4f,%.4f,%.4f\n", runs[i].c_str(),
                  manifests[i]["method"].get<std::string>().c_str(),
                  static_cast<long long>(trainer::count_images_per_step(cfg)),
                  reports[i].overall_b, reports[i].overall_a, reports[i].mean_forgetting);
    csv << buf;
  }
  csv.close();

  write_compare_plot((fs::path(out_dir) / "comparison.png").string(), reports);
  std::cout << "compared " << runs.size() << " runs -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int run(std::vector<std::string> args) {
  CLI::App app{"Continual attribute-guided image retrieval workbench"};
  app.require_subcommand(1);

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic attribute dataset");
  std::string gen_out;
  int gen_attrs = 4, gen_subclasses = 4, gen_per = 50, gen_size = 64;
  double gen_noise = 0.02, gen_translate = 0.06;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--attrs", gen_attrs, "number of attributes (max 6)")
      ->check(CLI::Range(1, 6))->capture_default_str();
  gen->add_option("--subclasses", gen_subclasses, "subclasses per attribute")
      ->check(CLI::Range(2, 64))->capture_default_str();
  gen->add_option("--per-subclass", gen_per, "items per (attribute, subclass)")
      ->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--image-size", gen_size, "square image size")->capture_default_str();
  gen->add_option("--noise", gen_noise, "pixel noise sigma")->capture_default_str();
  gen->add_option("--translate", gen_translate, "max translation fraction (<= 0.1)")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train one method over a task sequence");
  TrainFlags tf;
  train->set_config("--config", "", "flat key=value config file (flags override)");
  train->add_option("--data", tf.data, "dataset manifest(s) or directories")->required();
  train->add_option("--out", tf.out, "run directory (default $MCLFIR_OUT_ROOT/<method>-s<seed>)");
  train->add_option("--method", tf.method, "mclfir|er|multihead")->capture_default_str();
  train->add_option("--order", tf.order, "comma-separated attribute order (default: all)");
  train->add_option("--epochs", tf.epochs, "epochs per task")->capture_default_str();
  train->add_option("--doublets", tf.doublets, "training pairs per task")->capture_default_str();
  train->add_option("--batch", tf.batch, "mini-batch size B")->capture_default_str();
  train->add_option("--lambda", tf.lambda_kd, "distillation weight")->capture_default_str();
  train->add_option("--beta", tf.beta, "teacher momentum")->capture_default_str();
  train->add_option("--tau", tf.tau, "InfoNCE temperature")->capture_default_str();
  train->add_option("--margin", tf.margin, "triplet margin")->capture_default_str();
  train->add_option("--lr", tf.lr, "learning rate")->capture_default_str();
  train->add_option("--replay-capacity", tf.replay_capacity, "ER buffer size")
      ->capture_default_str();
  train->add_option("--distort-strength", tf.distort_strength, "perspective corner jitter")
      ->capture_default_str();
  train->add_option("--distort-prob", tf.distort_prob, "perspective apply probability")
      ->capture_default_str();
  train->add_option("--text-dim", tf.text_dim, "text embedding dimension")->capture_default_str();
  train->add_option("--seed", tf.seed, "run seed")->capture_default_str();

  // eval -------------------------------------------------------------------
  auto* evalc = app.add_subcommand("eval", "Per-attribute mAP and forgetting report");
  std::string eval_run, eval_export, eval_out;
  std::vector<std::string> eval_data;
  evalc->add_option("--run", eval_run, "run directory")->required();
  evalc->add_option("--data", eval_data, "dataset manifest(s)")->required();
  evalc->add_option("--export-attention", eval_export, "comma-separated item ids");
  evalc->add_option("--out", eval_out, "report directory (default: run dir)");

  // compare ----------------------------------------------------------------
  auto* cmp = app.add_subcommand("compare", "Compare evaluated runs");
  std::vector<std::string> cmp_runs, cmp_data;
  std::string cmp_out;
  cmp->add_option("--runs", cmp_runs, "two or more run directories")->required();
  cmp->add_option("--data", cmp_data, "dataset manifest(s), needed if a run lacks report.csv");
  cmp->add_option("--out", cmp_out, "comparison output directory")->required();

  std::reverse(args.begin(), args.end());  // CLI11 consumes args back to front
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      data::SynthConfig cfg;
      cfg.image_size = gen_size;
      cfg.items_per_subclass = gen_per;
      cfg.noise = gen_noise;
      cfg.max_translate = gen_translate;
      cfg.attributes.clear();
      for (int i = 0; i < gen_attrs; ++i)
        cfg.attributes.push_back({kFactorNames[static_cast<size_t>(i)], gen_subclasses});
      const data::Dataset ds = data::generate_synthetic(cfg, gen_seed);
      data::save_dataset(ds, gen_out);
      std::cout << "wrote " << ds.items.size() << " items, " << ds.attributes.size()
                << " attributes -> " << gen_out << "\n";
      return 0;
    }
    if (train->parsed()) return cmd_train(tf, train);
    if (evalc->parsed()) return cmd_eval(eval_run, eval_data, eval_export, eval_out);
    if (cmp->parsed()) return cmd_compare(cmp_runs, cmp_data, cmp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mclfir::cli
