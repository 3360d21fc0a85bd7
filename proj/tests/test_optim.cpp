#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "metalm/checkpoint.hpp"
#include "metalm/errors.hpp"
#include "metalm/optimizer.hpp"

using metalm::AdamW;
using metalm::AdamWOptions;
using metalm::LrSchedule;
using metalm::Rng;
using metalm::Tensor;

namespace {

std::filesystem::path temp_dir(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "metalm_optim_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void set_grad(Tensor& t, const std::vector<float>& g) {
  auto span = t.mutable_grad();
  REQUIRE(span.size() == g.size());
  std::copy(g.begin(), g.end(), span.begin());
}

}  // namespace

TEST_CASE("learning rate ramps linearly then decays to zero") {
  LrSchedule s;
  s.kind = "cosine";
  s.peak = 4e-3;
  s.warmup_steps = 100;
  s.total_steps = 1100;
  CHECK(s.at(0) == 0.0);
  CHECK(s.at(50) == doctest::Approx(2e-3));
  CHECK(s.at(100) == doctest::Approx(4e-3));
  CHECK(s.at(600) == doctest::Approx(2e-3));  // cosine midpoint is half peak
  CHECK(s.at(1100) == 0.0);
  CHECK(s.at(5000) == 0.0);
  for (int64_t t = 1; t <= 100; ++t) CHECK(s.at(t) > s.at(t - 1));
  for (int64_t t = 200; t <= 1100; t += 100) CHECK(s.at(t) < s.at(t - 100));

  LrSchedule lin = s;
  lin.kind = "linear";
  CHECK(lin.at(600) == doctest::Approx(2e-3));
  CHECK(lin.at(350) == doctest::Approx(4e-3 * 0.75));

  LrSchedule bad = s;
  bad.kind = "step";
  CHECK_THROWS_AS(bad.at(0), metalm::Error);
  LrSchedule nowarm = s;
  nowarm.warmup_steps = 0;
  CHECK(nowarm.at(0) == doctest::Approx(4e-3));
}

TEST_CASE("first update matches the closed form") {
  auto w = Tensor::from({2}, {1.0f, 2.0f});
  w.set_requires_grad(true);
  AdamWOptions opt;
  opt.weight_decay = 0.0;
  AdamW adam({{"w", &w}}, opt);
  set_grad(w, {0.1f, -0.2f});
  adam.step(0.1);
  // At t=1 bias correction cancels: update = g / (|g| + eps).
  double g0 = static_cast<double>(0.1f), g1 = static_cast<double>(-0.2f);
  double e0 = 1.0 - 0.1 * (g0 / (std::sqrt(g0 * g0) + 1e-8));
  double e1 = 2.0 - 0.1 * (g1 / (std::sqrt(g1 * g1) + 1e-8));
  CHECK(w.at(0) == doctest::Approx(e0).epsilon(1e-6));
  CHECK(w.at(1) == doctest::Approx(e1).epsilon(1e-6));
  CHECK(adam.steps_taken() == 1);
}

TEST_CASE("updates track an independent reference over many steps") {
  Rng rng(7);
  auto w = Tensor::randn({3, 4}, rng, 1.0f);
  w.set_requires_grad(true);
  std::vector<double> ref(w.data().begin(), w.data().end());
  std::vector<double> m(12, 0.0), v(12, 0.0);

  AdamWOptions opt;
  opt.weight_decay = 0.05;
  AdamW adam({{"w", &w}}, opt);

  Rng grad_rng(13);
  for (int t = 1; t <= 25; ++t) {
    std::vector<float> g(12);
    for (auto& x : g) x = static_cast<float>(grad_rng.normal() * 0.3);
    set_grad(w, g);
    adam.step(2e-3);
    double bc1 = 1.0 - std::pow(0.9, t), bc2 = 1.0 - std::pow(0.999, t);
    for (size_t j = 0; j < 12; ++j) {
      double gj = static_cast<double>(g[j]);
      m[j] = 0.9 * m[j] + 0.1 * gj;
      v[j] = 0.999 * v[j] + 0.001 * gj * gj;
      ref[j] -= 2e-3 * ((m[j] / bc1) / (std::sqrt(v[j] / bc2) + 1e-8) + 0.05 * ref[j]);
    }
  }
  for (size_t j = 0; j < 12; ++j)
    CHECK(static_cast<double>(w.data()[j]) == doctest::Approx(ref[j]).epsilon(1e-4));
}

TEST_CASE("weight decay skips vector parameters") {
  auto mat = Tensor::from({2, 2}, {1.0f, 1.0f, 1.0f, 1.0f});
  auto gain = Tensor::from({4}, {1.0f, 1.0f, 1.0f, 1.0f});
  mat.set_requires_grad(true);
  gain.set_requires_grad(true);
  AdamWOptions opt;
  opt.weight_decay = 0.1;
  AdamW adam({{"mat", &mat}, {"gain", &gain}}, opt);
  set_grad(mat, {0, 0, 0, 0});
  set_grad(gain, {0, 0, 0, 0});
  adam.step(0.01);
  for (int i = 0; i < 4; ++i) {
    CHECK(mat.data()[static_cast<size_t>(i)] == doctest::Approx(1.0 - 0.01 * 0.1));
    CHECK(gain.data()[static_cast<size_t>(i)] == 1.0f);
  }
}

TEST_CASE("non-finite gradients raise numeric errors") {
  auto w = Tensor::from({2}, {1.0f, 2.0f});
  w.set_requires_grad(true);
  AdamW adam({{"w", &w}}, {});
  set_grad(w, {std::numeric_limits<float>::infinity(), 0.0f});
  try {
    adam.step(0.1);
    CHECK(false);
  } catch (const metalm::Error& e) {
    CHECK(e.kind() == metalm::ErrorKind::numeric);
  }
}

TEST_CASE("optimizer state is exposed by name for checkpointing") {
  auto a = Tensor::from({2}, {1.0f, 2.0f});
  auto b = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  AdamW adam({{"a", &a}, {"b", &b}}, {});
  auto state = adam.state();
  REQUIRE(state.size() == 4);
  CHECK(state[0].first == "opt.m.a");
  CHECK(state[1].first == "opt.m.b");
  CHECK(state[2].first == "opt.v.a");
  CHECK(state[3].first == "opt.v.b");
  CHECK(state[0].second->size() == 2);
  CHECK(state[3].second->size() == 3);

  set_grad(a, {1.0f, 1.0f});
  set_grad(b, {0.0f, 0.0f, 0.0f});
  adam.step(0.01);
  CHECK((*state[0].second)[0] == doctest::Approx(0.1));
  adam.zero_grad();
  CHECK(a.grad()[0] == 0.0f);
}

TEST_CASE("generator state round trips through hex") {
  Rng a(42);
  for (int i = 0; i < 7; ++i) a.uniform();
  double first_normal = a.normal();  // leaves a cached spare
  (void)first_normal;
  std::string hex = a.state_hex();

  std::vector<double> expect;
  for (int i = 0; i < 5; ++i) expect.push_back(a.normal());
  for (int i = 0; i < 5; ++i) expect.push_back(a.uniform());

  Rng b(999);
  b.set_state_hex(hex);
  for (int i = 0; i < 5; ++i) CHECK(b.normal() == expect[static_cast<size_t>(i)]);
  for (int i = 0; i < 5; ++i) CHECK(b.uniform() == expect[static_cast<size_t>(5 + i)]);

  CHECK_THROWS_AS(b.set_state_hex("zz"), metalm::Error);
  CHECK_THROWS_AS(b.set_state_hex("abc"), metalm::Error);
}

TEST_CASE("checkpoints round trip tensors, config, rng, and vocab") {
  auto dir = temp_dir("roundtrip");
  std::vector<float> aw{1.5f, -0.0f, 3.25e-38f, 4.0f, -5.5f, 6.0f};
  std::vector<float> mw{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f};
  nlohmann::json config{{"model", {{"dim", 16}}}, {"seed", 7}};
  Rng rng(3);
  rng.uniform();
  auto vocab = metalm::Vocab::from_words({"<unk>", "<mask>", "<pad>", "tok"});

  metalm::save_checkpoint(dir, 123,
                          {{"a", {2, 3}, aw}, {"opt.m.a", {}, mw}}, config,
                          rng.state_hex(), &vocab);

  auto ck = metalm::load_checkpoint(dir);
  CHECK(ck.step == 123);
  CHECK(ck.config == config);
  CHECK(ck.rng_hex == rng.state_hex());
  REQUIRE(ck.tensors.size() == 2);
  CHECK(ck.tensors[0].first == "a");
  CHECK(ck.tensors[1].first == "opt.m.a");
  CHECK(ck.tensors[0].second.shape() == metalm::Shape{2, 3});
  CHECK(ck.tensors[1].second.shape() == metalm::Shape{6});
  CHECK(std::memcmp(ck.tensors[0].second.data().data(), aw.data(), 6 * sizeof(float)) == 0);
  CHECK(std::memcmp(ck.tensors[1].second.data().data(), mw.data(), 6 * sizeof(float)) == 0);
  REQUIRE(ck.vocab.has_value());
  CHECK(ck.vocab->words == vocab.words);

  CHECK(ck.find("missing") == nullptr);
  CHECK(ck.expect("a", {2, 3}).numel() == 6);
  CHECK_THROWS_AS(ck.expect("a", {3, 2}), metalm::Error);
  CHECK_THROWS_AS(ck.expect("missing", {1}), metalm::Error);

  // The manifest is plain JSON with byte offsets and a fixed dtype.
  std::ifstream mf(dir / "manifest.json");
  nlohmann::json manifest;
  mf >> manifest;
  CHECK(manifest["tensors"][0]["offset"] == 0);
  CHECK(manifest["tensors"][1]["offset"] == 24);
  CHECK(manifest["tensors"][0]["dtype"] == "f32");

  Rng restored(1);
  restored.set_state_hex(ck.rng_hex);
  Rng original = rng;
  CHECK(restored.uniform() == original.uniform());
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto dir = temp_dir("corrupt");
  std::vector<float> data{1.0f, 2.0f, 3.0f, 4.0f};
  metalm::save_checkpoint(dir, 1, {{"w", {2, 2}, data}}, nlohmann::json::object(), "", nullptr);

  SUBCASE("truncated weights fail with a checkpoint error") {
    std::filesystem::resize_file(dir / "weights.bin", 12);
    try {
      metalm::load_checkpoint(dir);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::checkpoint);
    }
  }
  SUBCASE("unsupported dtypes are rejected") {
    std::ifstream mf(dir / "manifest.json");
    nlohmann::json manifest;
    mf >> manifest;
    mf.close();
    manifest["tensors"][0]["dtype"] = "f16";
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump();
    out.close();
    CHECK_THROWS_AS(metalm::load_checkpoint(dir), metalm::Error);
  }
  SUBCASE("missing manifests are io errors") {
    std::filesystem::remove(dir / "manifest.json");
    try {
      metalm::load_checkpoint(dir);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::io);
    }
  }
  SUBCASE("mangled manifests are parse errors") {
    std::ofstream out(dir / "manifest.json");
    out << "{not json";
    out.close();
    try {
      metalm::load_checkpoint(dir);
      CHECK(false);
    } catch (const metalm::Error& e) {
      CHECK(e.kind() == metalm::ErrorKind::parse);
    }
  }
}

TEST_CASE("duplicate tensor names cannot be saved") {
  auto dir = temp_dir("dup");
  std::vector<float> data{1.0f};
  CHECK_THROWS_AS(metalm::save_checkpoint(dir, 0, {{"w", {1}, data}, {"w", {1}, data}},
                                          nlohmann::json::object(), "", nullptr),
                  metalm::Error);
}
