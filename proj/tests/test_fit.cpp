// End-to-end fit harness tests: config parsing and path resolution, the
// shape and determinism of the training trace, the ground-truth depth
// annealing weights, and a full finite-difference check of the assembled
// objective's gradient at step zero on the shipped smoke scene.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "alocc/errors.hpp"
#include "alocc/fit.hpp"
#include "alocc/tape.hpp"
#include "alocc/tensor.hpp"

using namespace alocc;
using alocc::ng::Tensor;

namespace {

std::string data_path(const char* name) {
  return std::string(ALOCC_DATA_DIR) + "/" + name;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
}

fit::RunConfig smoke_config() {
  return fit::load_config(data_path("smoke_fit.json"));
}

}  // namespace

TEST_CASE("config parsing fills defaults when fields are absent") {
  const fit::RunConfig cfg = fit::parse_config(R"({"scene": "s.json"})");
  CHECK(cfg.scene_path == "s.json");
  CHECK(cfg.feature_dim == 8);
  CHECK(cfg.hidden_dim == 16);
  CHECK(cfg.flow_hidden == 16);
  CHECK(cfg.inter_points == 3);
  CHECK(cfg.denoise_epochs == 6);
  CHECK(cfg.samples == 25088);
  CHECK(cfg.sem_loss.dice_weight == 5.0);
  CHECK(cfg.sem_loss.bce_weight == 20.0);
  CHECK(cfg.flow_bins.lo == -10.0);
  CHECK(cfg.flow_bins.hi == 10.0);
  CHECK(cfg.flow_bins.count == 16);
  CHECK(cfg.bev_z_min == 0.0);
  CHECK(cfg.bev_z_max == 4.0);
  CHECK(cfg.bev_factor == 2);
  CHECK(cfg.steps == 200);
  CHECK(cfg.lr == 0.05);
  CHECK(cfg.seed == 0);
  CHECK(cfg.out_dir == "out");
  CHECK(cfg.denoise);
  CHECK(cfg.inter_object);
  CHECK(cfg.cost_volume);
}

TEST_CASE("config parsing honors explicit overrides") {
  const fit::RunConfig cfg = fit::parse_config(R"({
    "scene": "x.json", "feature_dim": 3, "hidden_dim": 5, "flow_hidden": 7,
    "inter_points": 2, "denoise_epochs": 4, "samples": 100,
    "dice_weight": 2.5, "bce_weight": 1.5,
    "flow_bins": {"lo": -4.0, "hi": 4.0, "count": 8},
    "bev": {"z_min": 0.5, "z_max": 2.5, "factor": 4},
    "steps": 11, "lr": 0.125, "seed": 9, "out": "artifacts",
    "denoise": false, "inter_object": false, "cost_volume": false})");
  CHECK(cfg.scene_path == "x.json");
  CHECK(cfg.feature_dim == 3);
  CHECK(cfg.hidden_dim == 5);
  CHECK(cfg.flow_hidden == 7);
  CHECK(cfg.inter_points == 2);
  CHECK(cfg.denoise_epochs == 4);
  CHECK(cfg.samples == 100);
  CHECK(cfg.sem_loss.dice_weight == 2.5);
  CHECK(cfg.sem_loss.bce_weight == 1.5);
  CHECK(cfg.flow_bins.lo == -4.0);
  CHECK(cfg.flow_bins.hi == 4.0);
  CHECK(cfg.flow_bins.count == 8);
  CHECK(cfg.bev_z_min == 0.5);
  CHECK(cfg.bev_z_max == 2.5);
  CHECK(cfg.bev_factor == 4);
  CHECK(cfg.steps == 11);
  CHECK(cfg.lr == 0.125);
  CHECK(cfg.seed == 9);
  CHECK(cfg.out_dir == "artifacts");
  CHECK_FALSE(cfg.denoise);
  CHECK_FALSE(cfg.inter_object);
  CHECK_FALSE(cfg.cost_volume);
}

TEST_CASE("malformed configs are rejected") {
  CHECK_THROWS_AS(fit::parse_config("not json"), DataError);
  CHECK_THROWS_AS(fit::parse_config("{}"), DataError);  // scene is required
  CHECK_THROWS_AS(fit::parse_config(R"({"scene": 3})"), DataError);
  CHECK_THROWS_AS(fit::parse_config(R"({"scene": "s", "steps": "many"})"),
                  DataError);
  CHECK_THROWS_AS(fit::parse_config(R"({"scene": "s", "lr": -0.1})"),
                  DataError);
  CHECK_THROWS_AS(fit::load_config("/nonexistent/run.json"), DataError);
}

TEST_CASE("relative scene paths resolve against the config directory") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "alocc_fit_cfg";
  fs::create_directories(dir);
  spit((dir / "scene_copy.json").string(),
       slurp(data_path("smoke_2x2x2.json")));
  spit((dir / "run.json").string(), R"({"scene": "scene_copy.json"})");

  const fit::RunConfig cfg = fit::load_config((dir / "run.json").string());
  CHECK(cfg.scene_path == (dir / "scene_copy.json").string());
  const fit::Problem p = fit::load_problem(cfg);  // the copy must be loadable
  CHECK(p.pixels > 0);

  // An absolute scene path is kept as-is.
  spit((dir / "abs.json").string(),
       std::string(R"({"scene": ")") + data_path("smoke_2x2x2.json") + "\"}");
  CHECK(fit::load_config((dir / "abs.json").string()).scene_path ==
        data_path("smoke_2x2x2.json"));
}

TEST_CASE("problem assembly exposes both frames of the smoke scene") {
  const fit::Problem p = fit::load_problem(smoke_config());
  const std::size_t voxels = p.spec.grid.voxel_count();
  CHECK(voxels == 8);
  CHECK(p.pixels == 4);  // one 2x2 camera
  for (int f = 0; f < 2; ++f) {
    CHECK(p.frames[f].voxel_labels.size() == voxels);
    CHECK(p.frames[f].pixel_labels.size() == p.pixels);
    CHECK(p.frames[f].depth.valid.size() == p.pixels);
    CHECK(p.frames[f].depth.probs.shape()[0] == p.pixels);
  }
  // The box moves, so its class is flagged dynamic.
  REQUIRE(p.dynamic_classes.size() == 1);
  CHECK(p.dynamic_classes[0] == 1);
}

TEST_CASE("smoke fit produces a finite, shrinking loss trace") {
  const fit::RunConfig cfg = smoke_config();
  const fit::Problem p = fit::load_problem(cfg);
  const fit::FitResult r = fit::run_fit(cfg, p);

  REQUIRE(r.losses.size() == cfg.steps + 1);
  for (double l : r.losses) CHECK(std::isfinite(l));
  CHECK(r.losses.back() < r.losses.front());

  CHECK(r.pred_labels.size() == p.spec.grid.voxel_count());
  CHECK(r.pred_flow.size() == p.spec.grid.voxel_count() * 2);

  // Ground-truth depth annealing: full blend at step zero, off past the
  // horizon, never increasing in between.
  REQUIRE(r.denoise_weights.size() == cfg.steps + 1);
  CHECK(r.denoise_weights.front() == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t k = cfg.denoise_epochs; k < r.denoise_weights.size(); ++k)
    CHECK(r.denoise_weights[k] == 0.0);
  for (std::size_t k = 1; k < r.denoise_weights.size(); ++k)
    CHECK(r.denoise_weights[k] <= r.denoise_weights[k - 1] + 1e-15);
}

TEST_CASE("a zero learning rate leaves the objective untouched") {
  fit::RunConfig cfg = smoke_config();
  cfg.steps = 3;
  cfg.lr = 0.0;
  cfg.denoise = false;  // freeze the schedule so every step sees the same blend
  const fit::FitResult r = fit::run_fit(cfg, fit::load_problem(cfg));
  REQUIRE(r.losses.size() == 4);
  for (double l : r.losses) CHECK(l == r.losses.front());
}

TEST_CASE("identical seeds reproduce the run bit for bit") {
  fit::RunConfig cfg = smoke_config();
  cfg.steps = 8;
  const fit::Problem p = fit::load_problem(cfg);
  const fit::FitResult a = fit::run_fit(cfg, p);
  const fit::FitResult b = fit::run_fit(cfg, p);
  CHECK(a.losses == b.losses);
  CHECK(a.pred_labels == b.pred_labels);
  CHECK(a.pred_flow == b.pred_flow);

  fit::RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  const fit::FitResult c = fit::run_fit(other, p);
  CHECK(c.losses.front() != a.losses.front());  // a different initialization
}

TEST_CASE("per-step losses decompose into semantic and flow parts") {
  const fit::RunConfig cfg = smoke_config();
  const fit::Problem p = fit::load_problem(cfg);
  const fit::Model model = fit::init_model(cfg, p);
  ng::Tape tape;
  const fit::StepLosses sl = fit::forward(tape, cfg, p, model, 0);
  CHECK(ng::close(sl.total.scalar_value(),
                  sl.sem.scalar_value() + sl.flow, 1e-12, 1e-12));
  CHECK(ng::close(sl.sem.scalar_value(), sl.sem_cur + sl.sem_prev, 1e-12,
                  1e-12));
}

TEST_CASE("step-zero gradients match finite differences on the smoke scene") {
  const fit::RunConfig cfg = smoke_config();
  const fit::Problem p = fit::load_problem(cfg);
  const fit::Model model = fit::init_model(cfg, p);

  // Analytic gradients of the assembled objective.
  ng::Tape tape;
  const fit::StepLosses sl = fit::forward(tape, cfg, p, model, 0);
  const auto grads = tape.backward(sl.total);

  // Finite differences, re-running the whole pipeline per element. The leaf
  // order mirrors Model::leaves().
  fit::Model probe = model;
  const std::vector<Tensor*> leaves = probe.leaves();
  std::vector<Tensor*> reference = const_cast<fit::Model&>(model).leaves();
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Tensor* slot = leaves[i];
    const auto fn = [&](const Tensor& x) {
      const Tensor saved = *slot;
      *slot = x;
      ng::Tape local;
      const double value =
          fit::forward(local, cfg, p, probe, 0).total.scalar_value();
      *slot = saved;
      return value;
    };
    const Tensor fd = ng::finite_diff(fn, *reference[i], 1e-5);
    const Tensor& an = grads.at(sl.leaf_nodes[i]);
    REQUIRE(fd.numel() == an.numel());
    for (std::size_t e = 0; e < fd.numel(); ++e)
      CHECK_MESSAGE(ng::close(an.at(e), fd.at(e), 1e-4, 1e-6),
                    "leaf " << i << " entry " << e << ": analytic "
                            << an.at(e) << " vs fd " << fd.at(e));
  }
}
