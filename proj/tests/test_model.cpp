#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mclfir/attention.hpp"
#include "mclfir/encoder.hpp"
#include "mclfir/losses.hpp"
#include "mclfir/verify.hpp"
#include "testutil.hpp"

using namespace mclfir;
using testutil::check_graph_gradient;
using testutil::random_tensor;

namespace {

Image random_image(int size, Rng& rng) {
  Image img(size, size);
  for (auto& v : img.pixels) v = rng.uniform();
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

TEST_CASE("encoder desk config produces the declared map shape") {
  encoder::EncoderConfig cfg;  // 64x64, stages 16/32/64
  encoder::Encoder enc(cfg, 1);
  Rng rng(2);
  const Image img = random_image(64, rng);
  const auto fm = enc.encode(img);
  CHECK(fm.tensor.shape() == std::vector<int64_t>{64, 8, 8});
  CHECK(cfg.paper().out_channels() == 1024);

  const auto fm2 = enc.encode(img);
  CHECK(fm2.tensor.same_shape(fm.tensor));
  for (int64_t i = 0; i < fm.tensor.numel(); ++i) CHECK(fm.tensor[i] == fm2.tensor[i]);

  Image wrong(32, 32);
  CHECK_THROWS(enc.encode(wrong));
}

TEST_CASE("encoder outputs stay finite over random inputs") {
  encoder::EncoderConfig cfg;
  cfg.image_size = 32;
  encoder::Encoder enc(cfg, 3);
  Rng rng(4);
  for (int i = 0; i < 12; ++i) {
    const Image img = random_image(32, rng);
    CHECK(enc.encode(img).tensor.all_finite());
  }
}

TEST_CASE("teacher initialization copies the student exactly") {
  encoder::EncoderConfig cfg;
  cfg.image_size = 16;
  encoder::Encoder enc(cfg, 5);
  encoder::EmaTeacher teacher(enc, 0.999);
  CHECK(teacher.state().bytes_equal(enc.state()));
  CHECK(teacher.step() == 0);
  CHECK_THROWS(encoder::EmaTeacher(enc, 1.0));
  CHECK_THROWS(encoder::EmaTeacher(enc, -0.1));
}

TEST_CASE("ema_update blends, contracts and matches the closed form") {
  encoder::EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.stage_channels = {4, 8};
  encoder::Encoder student(cfg, 6);
  encoder::EmaTeacher teacher(student, 0.9);

  SUBCASE("teacher equal to student is a fixed point") {
    teacher.update(student);
    CHECK(teacher.state().bytes_equal(student.state()));
    CHECK(teacher.step() == 1);
  }

  SUBCASE("single scalar blend") {
    // theta_T = 1, theta_S = 0, beta = 0.9 -> 0.9 after one update.
    StateDict one = student.state();
    for (auto& [name, t] : one.entries)
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = 1.0;
    teacher.load_state(one);
    StateDict zero = student.state();
    for (auto& [name, t] : zero.entries)
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    student.load_state(zero);
    teacher.update(student);
    for (const auto& [name, t] : teacher.state().entries)
      for (int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == doctest::Approx(0.9).epsilon(1e-15));
  }

  SUBCASE("iterated updates against a frozen student match the closed form") {
    const StateDict before = teacher.state();
    for (int i = 0; i < 1000; ++i) teacher.update(student);
    const StateDict after = teacher.state();
    const StateDict target = student.state();
    for (size_t e = 0; e < after.entries.size(); ++e) {
      const Tensor& t0 = before.entries[e].second;
      const Tensor& tN = after.entries[e].second;
      const Tensor& ts = target.entries[e].second;
      for (int64_t i = 0; i < tN.numel(); ++i) {
        const double expect = verify::closed_form_ema(t0[i], ts[i], 0.9, 1000);
        CHECK(std::abs(tN[i] - expect) < 1e-10);
      }
    }
    CHECK(teacher.step() == 1000);
  }

  SUBCASE("per-element distance to the student contracts by beta") {
    encoder::Encoder other(cfg, 7);
    const StateDict target = other.state();
    StateDict gap_before = teacher.state();
    teacher.update(other);
    const StateDict after = teacher.state();
    for (size_t e = 0; e < after.entries.size(); ++e) {
      const Tensor& t0 = gap_before.entries[e].second;
      const Tensor& t1 = after.entries[e].second;
      const Tensor& ts = target.entries[e].second;
      for (int64_t i = 0; i < t1.numel(); ++i)
        CHECK(std::abs(t1[i] - ts[i]) ==
              doctest::Approx(0.9 * std::abs(t0[i] - ts[i])).epsilon(1e-9));
    }
  }
}

TEST_CASE("checkpoint round trip is byte exact") {
  encoder::EncoderConfig cfg;
  cfg.image_size = 16;
  encoder::Encoder enc(cfg, 8);
  const StateDict state = enc.state();
  testutil::TempDir dir("ckpt");
  const std::string path = (dir.path() / "model.ckpt").string();
  save_checkpoint(state, path);
  const StateDict loaded = load_checkpoint(path);
  CHECK(loaded.bytes_equal(state));
  CHECK_THROWS(load_checkpoint((dir.path() / "missing.ckpt").string()));
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

TEST_CASE("head parameter counts") {
  CHECK(attention::head_param_count(attention::HeadConfig::paper()) == 246528);
  // All dimensions 1: conv 1+1, norm 2, text 1+1, gate layers (2+1)+(1+1).
  CHECK(attention::head_param_count({1, 1, 1, 1}) == 11);

  attention::AttentionHead head("probe-attr", {16, 8, 12, 6}, 1);
  CHECK(head.param_count() == attention::head_param_count({16, 8, 12, 6}));
  CHECK_THROWS(attention::head_param_count({0, 1, 1, 1}));
}

TEST_CASE("reduce_features: tanh range, zero case, gradient") {
  const attention::HeadConfig cfg{5, 4, 7, 3};
  attention::AttentionHead head("reduce-attr", cfg, 2);
  Rng rng(9);

  encoder::FeatureMap fm;
  fm.tensor = random_tensor({5, 3, 3}, rng, -2.0, 2.0);
  const auto reduced = attention::reduce_features(head, fm);
  CHECK(reduced.tensor.shape() == std::vector<int64_t>{4, 3, 3});
  for (int64_t i = 0; i < reduced.tensor.numel(); ++i) {
    CHECK(reduced.tensor[i] > -1.0);
    CHECK(reduced.tensor[i] < 1.0);
  }

  // Zero conv weights and biases with identity normalization give all zeros.
  StateDict zeroed = head.state();
  for (auto& [name, t] : zeroed.entries)
    if (name == "conv_w" || name == "conv_b")
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  attention::AttentionHead zero_head("reduce-attr", cfg, zeroed, true);
  const auto zeros = attention::reduce_features(zero_head, fm);
  for (int64_t i = 0; i < zeros.tensor.numel(); ++i) CHECK(zeros.tensor[i] == 0.0);

  encoder::FeatureMap bad;
  bad.tensor = random_tensor({4, 3, 3}, rng);
  CHECK_THROWS(attention::reduce_features(head, bad));

  // Analytic vs central differences through conv + batch norm + tanh on a
  // 2x2 map, training-mode statistics.
  const std::vector<std::vector<int64_t>> shapes = {
      {1, 3, 2, 2}, {4, 3, 1, 1}, {4}, {4}, {4}};
  const Tensor probe = random_tensor({1, 4, 2, 2}, rng);
  auto build = [&probe](const std::vector<ad::Var>& v) {
    ad::Var x = ad::conv2d(v[0], v[1], v[2], 1, 0);
    x = ad::batch_norm(x, v[3], v[4], nullptr, true);
    return ad::dot(ad::tanh_op(x), ad::constant(probe));
  };
  const auto point = testutil::flatten({random_tensor({1, 3, 2, 2}, rng),
                                        random_tensor({4, 3, 1, 1}, rng),
                                        random_tensor({4}, rng, 0.5, 1.5),
                                        random_tensor({4}, rng),
                                        random_tensor({4}, rng)});
  const auto report = check_graph_gradient("reduce_features", shapes, build, point);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("project_text: zero, identity, matvec oracle") {
  Rng rng(10);

  SUBCASE("zero weights produce the zero vector") {
    attention::AttentionHead head("proj-attr", {3, 4, 6, 3}, 3);
    StateDict s = head.state();
    for (auto& [name, t] : s.entries)
      if (name == "text_w" || name == "text_b")
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    attention::AttentionHead zhead("proj-attr", {3, 4, 6, 3}, s, true);
    const auto out = attention::project_text(zhead, {random_tensor({6}, rng), "proj-attr"});
    for (int64_t i = 0; i < out.vector.numel(); ++i) CHECK(out.vector[i] == 0.0);
  }

  SUBCASE("identity weights copy the input when dimensions agree") {
    const attention::HeadConfig cfg{3, 4, 4, 3};
    attention::AttentionHead head("proj-attr", cfg, 3);
    StateDict s = head.state();
    for (auto& [name, t] : s.entries) {
      if (name == "text_w") {
        for (int64_t i = 0; i < 4; ++i)
          for (int64_t j = 0; j < 4; ++j) t.at2(i, j) = i == j ? 1.0 : 0.0;
      } else if (name == "text_b") {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
      }
    }
    attention::AttentionHead ihead("proj-attr", cfg, s, true);
    const Tensor input = random_tensor({4}, rng);
    const auto out = attention::project_text(ihead, {input, "proj-attr"});
    for (int64_t i = 0; i < 4; ++i) CHECK(out.vector[i] == doctest::Approx(input[i]));
  }

  SUBCASE("random case matches the double-loop matvec oracle") {
    const attention::HeadConfig cfg{3, 5, 9, 3};
    attention::AttentionHead head("proj-attr", cfg, 4);
    const Tensor input = random_tensor({9}, rng);
    const auto out = attention::project_text(head, {input, "proj-attr"});
    const StateDict s = head.state();
    const Tensor& w = s.at("text_w");
    const Tensor& b = s.at("text_b");
    for (int64_t i = 0; i < 5; ++i) {
      double acc = b[i];
      for (int64_t j = 0; j < 9; ++j) acc += w.at2(i, j) * input[j];
      CHECK(std::abs(out.vector[i] - acc) < 1e-10);
    }
    CHECK_THROWS(attention::project_text(head, {random_tensor({8}, rng), "proj-attr"}));
  }
}

TEST_CASE("spatial_attention: uniform case, hand-computed case, normalization") {
  SUBCASE("constant scores give the uniform map") {
    attention::ReducedMap reduced{Tensor::full({3, 2, 2}, 0.25)};
    attention::AttrVector attr{Tensor::full({3}, 0.7)};
    const auto [amap, pooled] = attention::spatial_attention(reduced, attr);
    for (int64_t i = 0; i < 4; ++i) CHECK(amap.weights[i] == doctest::Approx(0.25));
  }

  SUBCASE("1x2 grid hand evaluation") {
    // scores = [1,-1]; softmax = [0.8808, 0.1192]; pooled = 0.3808.
    attention::ReducedMap reduced{Tensor::from({1, 1, 2}, {0.5, -0.5})};
    attention::AttrVector attr{Tensor::from({1}, {2.0})};
    const auto [amap, pooled] = attention::spatial_attention(reduced, attr);
    CHECK(amap.weights[0] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(amap.weights[1] == doctest::Approx(0.1192).epsilon(1e-4));
    CHECK(pooled[0] == doctest::Approx(0.3808).epsilon(1e-4));
  }

  SUBCASE("weights sum to one over random inputs") {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
      attention::ReducedMap reduced{random_tensor({4, 3, 5}, rng, -1.0, 1.0)};
      attention::AttrVector attr{random_tensor({4}, rng, -3.0, 3.0)};
      const auto [amap, pooled] = attention::spatial_attention(reduced, attr);
      double sum = 0;
      for (int64_t j = 0; j < amap.weights.numel(); ++j) sum += amap.weights[j];
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }

  SUBCASE("positive rescaling of the attribute keeps the argmax") {
    Rng rng(12);
    attention::ReducedMap reduced{random_tensor({4, 3, 3}, rng)};
    attention::AttrVector attr{random_tensor({4}, rng)};
    const auto [amap, pooled] = attention::spatial_attention(reduced, attr);
    attention::AttrVector scaled{attr.vector};
    for (int64_t i = 0; i < 4; ++i) scaled.vector[i] *= 7.5;
    const auto [amap2, pooled2] = attention::spatial_attention(reduced, scaled);
    const auto argmax = [](const Tensor& t) {
      int64_t best = 0;
      for (int64_t i = 1; i < t.numel(); ++i)
        if (t[i] > t[best]) best = i;
      return best;
    };
    CHECK(argmax(amap.weights) == argmax(amap2.weights));
    CHECK(amap2.weights.max_value() > amap.weights.max_value());  // sharper
  }
}

TEST_CASE("channel_attention: sigmoid-zero case, gate range, MLP oracle") {
  Rng rng(13);
  const attention::HeadConfig cfg{3, 4, 6, 5};

  SUBCASE("zero gate layers halve the pooled vector") {
    attention::AttentionHead head("gate-attr", cfg, 5);
    StateDict s = head.state();
    for (auto& [name, t] : s.entries)
      if (name.rfind("mlp", 0) == 0)
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    attention::AttentionHead zhead("gate-attr", cfg, s, true);
    const Tensor pooled = random_tensor({4}, rng);
    const auto out = attention::channel_attention(zhead, pooled, {random_tensor({4}, rng)});
    for (int64_t i = 0; i < 4; ++i)
      CHECK(out.vector[i] == doctest::Approx(0.5 * pooled[i]).epsilon(1e-12));
  }

  SUBCASE("output is elementwise dominated by the pooled input") {
    attention::AttentionHead head("gate-attr", cfg, 6);
    for (int round = 0; round < 50; ++round) {
      const Tensor pooled = random_tensor({4}, rng, -2.0, 2.0);
      const auto out = attention::channel_attention(head, pooled, {random_tensor({4}, rng)});
      for (int64_t i = 0; i < 4; ++i) CHECK(std::abs(out.vector[i]) <= std::abs(pooled[i]));
    }
  }

  SUBCASE("random case matches a double-loop MLP oracle") {
    attention::AttentionHead head("gate-attr", cfg, 7);
    const Tensor pooled = random_tensor({4}, rng);
    const Tensor attr = random_tensor({4}, rng);
    const auto out = attention::channel_attention(head, pooled, {attr});

    const StateDict s = head.state();
    const Tensor& w1 = s.at("mlp1_w");
    const Tensor& b1 = s.at("mlp1_b");
    const Tensor& w2 = s.at("mlp2_w");
    const Tensor& b2 = s.at("mlp2_b");
    std::vector<double> u(8);
    for (int i = 0; i < 4; ++i) u[static_cast<size_t>(i)] = pooled[i];
    for (int i = 0; i < 4; ++i) u[static_cast<size_t>(4 + i)] = attr[i];
    std::vector<double> hidden(5);
    for (int64_t i = 0; i < 5; ++i) {
      double acc = b1[i];
      for (int64_t j = 0; j < 8; ++j) acc += w1.at2(i, j) * u[static_cast<size_t>(j)];
      hidden[static_cast<size_t>(i)] = std::max(0.0, acc);
    }
    for (int64_t i = 0; i < 4; ++i) {
      double acc = b2[i];
      for (int64_t j = 0; j < 5; ++j) acc += w2.at2(i, j) * hidden[static_cast<size_t>(j)];
      const double gate = 1.0 / (1.0 + std::exp(-acc));
      CHECK(std::abs(out.vector[i] - pooled[i] * gate) < 1e-10);
    }
  }
}

TEST_CASE("registry add/duplicate/unknown and forward_head output") {
  attention::HeadRegistry registry;
  CHECK(registry.size() == 0);
  registry.add_head("skirt-length", {8, 6, 10, 4}, 1);
  CHECK(registry.size() == 1);
  CHECK_THROWS(registry.add_head("skirt-length", {8, 6, 10, 4}, 2));
  CHECK_THROWS_WITH_AS(registry.head("sleeve-length"), doctest::Contains("sleeve-length"),
                       std::out_of_range);

  registry.add_head("sleeve-length", {8, 6, 10, 4}, 3);
  bool differs = false;
  const StateDict a = registry.head("skirt-length").state();
  const StateDict b = registry.head("sleeve-length").state();
  for (size_t i = 0; i < a.entries.size() && !differs; ++i)
    differs = !tensor_bytes_equal(a.entries[i].second, b.entries[i].second);
  CHECK(differs);

  Rng rng(14);
  encoder::FeatureMap fm;
  fm.tensor = random_tensor({8, 2, 2}, rng);
  textemb::TextEmbedding traw{random_tensor({10}, rng), "skirt-length"};
  const auto emb = attention::forward_head(registry, "skirt-length", fm, traw);
  CHECK(emb.vector.numel() == 6);
  CHECK(emb.attribute == "skirt-length");
  CHECK_THROWS(attention::forward_head(registry, "nope", fm, traw));

  // Paper config head produces 128-dimensional embeddings.
  attention::HeadRegistry paper_reg;
  paper_reg.add_head("paper-attr", attention::HeadConfig::paper(), 4);
  encoder::FeatureMap paper_fm;
  paper_fm.tensor = random_tensor({1024, 2, 2}, rng);
  textemb::TextEmbedding paper_t{random_tensor({512}, rng), "paper-attr"};
  CHECK(attention::forward_head(paper_reg, "paper-attr", paper_fm, paper_t).vector.numel() ==
        128);
}

TEST_CASE("full head forward gradient matches finite differences") {
  Rng rng(15);
  const int c_img = 3, d = 4, d_text = 5, d_hidden = 6;
  const Tensor probe = random_tensor({1, d}, rng);

  // Leaves: fmap, conv_w, conv_b, gamma, beta, text_w, text_b, mlp1_w,
  // mlp1_b, mlp2_w, mlp2_b, raw text.
  const std::vector<std::vector<int64_t>> shapes = {
      {1, c_img, 2, 2}, {d, c_img, 1, 1}, {d}, {d}, {d},
      {d, d_text}, {d}, {d_hidden, 2 * d}, {d_hidden}, {d, d_hidden}, {d}, {1, d_text}};
  auto build = [&](const std::vector<ad::Var>& v) {
    ad::Var reduced = ad::tanh_op(
        ad::batch_norm(ad::conv2d(v[0], v[1], v[2], 1, 0), v[3], v[4], nullptr, true));
    ad::Var attr = ad::linear(v[11], v[5], v[6]);
    ad::Var attr_vec = ad::reshape(attr, {d});
    ad::Var weights = ad::softmax_rows(ad::attn_scores(reduced, attr_vec));
    ad::Var pooled = ad::attn_pool(reduced, weights);
    ad::Var u = ad::concat_cols(pooled, attr);
    ad::Var gate = ad::sigmoid(ad::linear(ad::relu(ad::linear(u, v[7], v[8])), v[9], v[10]));
    return ad::dot(ad::mul(pooled, gate), ad::constant(probe));
  };
  std::vector<Tensor> tensors;
  for (const auto& s : shapes) tensors.push_back(random_tensor(s, rng));
  const auto report = check_graph_gradient("forward_head", shapes, build,
                                           testutil::flatten(tensors));
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("head forward is equivariant under spatial permutation") {
  Rng rng(16);
  const attention::HeadConfig cfg{5, 6, 8, 4};
  attention::AttentionHead head("perm-attr", cfg, 8);
  const Tensor fmap = random_tensor({1, 5, 2, 3}, rng);
  const Tensor traw = random_tensor({8}, rng);

  // Fixed permutation of the 6 spatial positions.
  std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor permuted({1, 5, 2, 3});
  for (int64_t c = 0; c < 5; ++c)
    for (int64_t p = 0; p < 6; ++p)
      permuted[c * 6 + perm[static_cast<size_t>(p)]] = fmap[c * 6 + p];

  const auto base = head.forward(ad::constant(fmap), ad::constant(traw), Mode::eval);
  const auto moved = head.forward(ad::constant(permuted), ad::constant(traw), Mode::eval);

  for (int64_t p = 0; p < 6; ++p)
    CHECK(moved.weights->value[perm[static_cast<size_t>(p)]] ==
          doctest::Approx(base.weights->value[p]).epsilon(1e-9));
  for (int64_t i = 0; i < 6; ++i)
    CHECK(moved.embedding->value[i] == doctest::Approx(base.embedding->value[i]).epsilon(1e-9));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

TEST_CASE("info_nce degenerate and closed-form cases") {
  Rng rng(17);
  CHECK(losses::info_nce_value(random_tensor({1, 4}, rng), random_tensor({1, 4}, rng), 0.3) ==
        0.0);

  // Orthonormal pairs at B=2: every row sees its positive at similarity 1
  // and two negatives at 0, so the loss is log(1 + 2 exp(-1/tau)).
  const Tensor anchors = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor positives = Tensor::from({2, 2}, {1, 0, 0, 1});
  const double tau = 0.3;
  const double expected = std::log(1.0 + 2.0 * std::exp(-1.0 / tau));
  CHECK(losses::info_nce_value(anchors, positives, tau) ==
        doctest::Approx(expected).epsilon(1e-12));

  CHECK_THROWS(losses::info_nce_value(anchors, positives, 0.0));
  CHECK_THROWS(losses::info_nce_value(anchors, random_tensor({3, 2}, rng), 0.3));
  CHECK_THROWS(losses::info_nce_value(Tensor::zeros({2, 2}), positives, 0.3));
}

TEST_CASE("info_nce equals the naive per-row oracle") {
  Rng rng(18);
  for (const int64_t b : {1, 2, 4, 8}) {
    for (const int64_t d : {2, 128}) {
      for (int round = 0; round < 5; ++round) {
        const Tensor anchors = random_tensor({b, d}, rng, -1.0, 1.0);
        const Tensor positives = random_tensor({b, d}, rng, -1.0, 1.0);
        const double fast = losses::info_nce_value(anchors, positives, 0.3);
        const double naive = verify::naive_info_nce(anchors, positives, 0.3);
        CHECK(std::abs(fast - naive) < 1e-6);
      }
    }
  }
}

TEST_CASE("info_nce invariances and monotonicity") {
  Rng rng(19);
  const int64_t b = 4, d = 8;
  const Tensor anchors = random_tensor({b, d}, rng);
  const Tensor positives = random_tensor({b, d}, rng);
  const double base = losses::info_nce_value(anchors, positives, 0.3);
  CHECK(base >= 0.0);

  SUBCASE("common permutation of row pairs") {
    const std::vector<int64_t> perm = {2, 0, 3, 1};
    Tensor pa({b, d}), pp({b, d});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < d; ++j) {
        pa.at2(i, j) = anchors.at2(perm[static_cast<size_t>(i)], j);
        pp.at2(i, j) = positives.at2(perm[static_cast<size_t>(i)], j);
      }
    CHECK(losses::info_nce_value(pa, pp, 0.3) == doctest::Approx(base).epsilon(1e-12));
  }

  SUBCASE("positive row rescaling is absorbed by normalization") {
    Tensor sa = anchors, sp = positives;
    for (int64_t i = 0; i < b; ++i) {
      const double ka = 0.5 + static_cast<double>(i);
      for (int64_t j = 0; j < d; ++j) {
        sa.at2(i, j) *= ka;
        sp.at2(i, j) *= 2.0 * ka;
      }
    }
    CHECK(losses::info_nce_value(sa, sp, 0.3) == doctest::Approx(base).epsilon(1e-10));
  }

  SUBCASE("better separation means lower loss, near zero when perfect") {
    Tensor ga({2, 4}), gp({2, 4});
    ga.at2(0, 0) = gp.at2(0, 0) = 1.0;
    ga.at2(1, 1) = gp.at2(1, 1) = 1.0;
    const double tight = losses::info_nce_value(ga, gp, 0.05);
    CHECK(tight < 1e-5);

    Tensor wa = ga, wp = gp;
    wp.at2(0, 0) = -1.0;  // positive pair pointing apart scores worse
    CHECK(losses::info_nce_value(wa, wp, 0.05) > tight);
  }
}

TEST_CASE("info_nce gradient matches finite differences") {
  Rng rng(20);
  const std::vector<std::vector<int64_t>> shapes = {{3, 5}, {3, 5}};
  const auto point = testutil::flatten(
      {random_tensor({3, 5}, rng, 0.2, 1.0), random_tensor({3, 5}, rng, 0.2, 1.0)});
  auto build = [](const std::vector<ad::Var>& v) { return losses::info_nce(v[0], v[1], 0.3); };
  CHECK(check_graph_gradient("info_nce", shapes, build, point).max_rel_err < 1e-3);
}

TEST_CASE("distill_mse values and stop-gradient contract") {
  const Tensor a = Tensor::from({1, 1, 1}, {1.0});
  const Tensor b = Tensor::from({1, 1, 1}, {3.0});
  CHECK(losses::distill_mse_value({a, a}, {a, a}) == 0.0);
  CHECK(losses::distill_mse_value({a}, {b}) == doctest::Approx(4.0));
  CHECK(losses::distill_mse_value({a, a}, {b, b}) == doctest::Approx(8.0));
  CHECK_THROWS(losses::distill_mse_value({}, {}));
  CHECK_THROWS(losses::distill_mse_value({a}, {Tensor::zeros({2, 1, 1})}));

  Rng rng(21);
  ad::Var student = ad::leaf(random_tensor({2, 3}, rng));
  ad::Var teacher = ad::constant(random_tensor({2, 3}, rng));
  ad::backward(losses::distill_mse({{student, teacher}}));
  CHECK(student->has_grad());
  CHECK(!teacher->has_grad());

  const std::vector<std::vector<int64_t>> shapes = {{2, 3}, {2, 3}};
  const auto point =
      testutil::flatten({random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  auto build = [](const std::vector<ad::Var>& v) { return losses::distill_mse({{v[0], v[1]}}); };
  CHECK(check_graph_gradient("distill_mse", shapes, build, point).max_rel_err < 1e-3);
}

TEST_CASE("total_loss weighting") {
  CHECK(losses::total_loss_value(1.5, 99.0, 0.0) == 1.5);
  CHECK(losses::total_loss_value(1.0, 10.0, 0.1) == doctest::Approx(2.0));
  const losses::Hyperparams defaults;
  CHECK(defaults.lambda_kd == 1e-4);
  CHECK(defaults.tau == 0.3);
  CHECK(defaults.margin == 0.2);
  CHECK(defaults.beta == 0.999);
  CHECK(defaults.batch == 32);
}

TEST_CASE("similarity of normalized embeddings") {
  Rng rng(22);
  const Tensor a = random_tensor({6}, rng);
  CHECK(losses::similarity_value(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  const Tensor e1 = Tensor::from({2}, {1.0, 0.0});
  const Tensor e2 = Tensor::from({2}, {0.0, 1.0});
  CHECK(losses::similarity_value(e1, e2) == doctest::Approx(0.0));

  const Tensor b = random_tensor({6}, rng);
  double ab = 0, aa = 0, bb = 0;
  for (int64_t i = 0; i < 6; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  CHECK(std::abs(losses::similarity_value(a, b) - ab / std::sqrt(aa * bb)) < 1e-12);
  CHECK_THROWS(losses::similarity_value(Tensor::zeros({6}), b));
}

TEST_CASE("triplet_loss hinge cases and gradients") {
  // cos(anchor, positive) = 0.5, cos(anchor, negative) = 0.6, margin 0.2.
  const Tensor anchor = Tensor::from({2}, {1.0, 0.0});
  const Tensor positive = Tensor::from({2}, {0.5, std::sqrt(3.0) / 2.0});
  const Tensor negative = Tensor::from({2}, {0.6, 0.8});
  CHECK(losses::triplet_loss_value(anchor, positive, negative, 0.2) ==
        doctest::Approx(0.3).epsilon(1e-12));

  // Positive clearly ahead of the negative by more than the margin: inactive.
  CHECK(losses::triplet_loss_value(anchor, anchor, negative, 0.2) == 0.0);

  SUBCASE("gradient is exactly zero when the hinge is inactive") {
    ad::Var a = ad::leaf(anchor);
    ad::Var p = ad::leaf(anchor);
    ad::Var n = ad::leaf(negative);
    ad::backward(losses::triplet_loss(a, p, n, 0.2));
    for (int64_t i = 0; i < 2; ++i) {
      CHECK(a->grad[i] == 0.0);
      CHECK(n->grad[i] == 0.0);
    }
  }

  SUBCASE("active hinge gradient matches finite differences") {
    Rng rng(23);
    const std::vector<std::vector<int64_t>> shapes = {{4}, {4}, {4}};
    const auto point = testutil::flatten({random_tensor({4}, rng, 0.2, 1.0),
                                          random_tensor({4}, rng, 0.2, 1.0),
                                          random_tensor({4}, rng, 0.2, 1.0)});
    auto build = [](const std::vector<ad::Var>& v) {
      return losses::triplet_loss(v[0], v[1], v[2], 0.9);  // wide margin keeps it active
    };
    CHECK(check_graph_gradient("triplet_loss", shapes, build, point).max_rel_err < 1e-3);
  }
}
