#pragma once

// Experiment runner: trains (or reloads) the model pipeline into a work
// directory and evaluates the directional claims as verdicts over metric grids.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "idinvert/editing.hpp"
#include "idinvert/encoder.hpp"
#include "idinvert/features.hpp"
#include "idinvert/gan.hpp"
#include "idinvert/inversion.hpp"
#include "idinvert/synth_data.hpp"

namespace idinvert::harness {

using LogFn = std::function<void(const std::string&)>;

struct PipelineConfig {
  std::filesystem::path work_dir = "work";
  data::DatasetConfig train_data;      // GAN, feature net and encoder training images
  data::DatasetConfig test_data;       // held-out images every metric is measured on
  data::DatasetConfig reference_data;  // real set the FID proxies compare against
  gan::GanConfig gan;
  features::FeatureNetConfig features;
  encoder::EncoderConfig encoder;
  int boundary_samples = 2000;
  std::uint64_t boundary_seed = 4;
};

/// Defaults: 2000 training images (seed 1), 200 test (seed 2), 500 reference (seed 3).
PipelineConfig default_pipeline_config();
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PipelineConfig& c);

/// Lazily trained artifacts. Every checkpoint lives in work_dir under a name
/// derived from the hash of its config and inputs, next to a sidecar JSON with
/// its training wall time, so reruns reuse it and config edits retrain.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, LogFn log = {});
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  const PipelineConfig& config() const { return config_; }

  const std::vector<data::Sample>& train_set();
  const std::vector<data::Sample>& test_set();
  const std::vector<ImageTensor>& test_images();
  const std::vector<ImageTensor>& reference_images();

  const gan::GanModel& gan();
  const std::filesystem::path& generator_path();
  const std::string& generator_hash();
  const features::FeatureNet& features();
  /// Domain-guided encoder with the pipeline's config.
  const encoder::Encoder& encoder();
  /// Domain-guided encoder trained with `config` (cached per config).
  const encoder::Encoder& encoder_variant(const encoder::EncoderConfig& config);
  /// Path of a variant's checkpoint (trains it if needed).
  std::filesystem::path encoder_path(const encoder::EncoderConfig& config);
  /// Per-step training log of a variant, read back from its sidecar CSV.
  std::vector<encoder::EncoderLogEntry> encoder_log(const encoder::EncoderConfig& config);
  const encoder::Encoder& conventional_encoder();
  /// Boundaries fit on oracle-labeled generator samples (all kBoundaryAttributes).
  const std::vector<editing::SemanticBoundary>& boundaries();
  std::filesystem::path boundaries_path();

  inversion::Models models(const encoder::Encoder& e);
  /// Inversions of the first `n` test images (memoized by config, encoder and n).
  const std::vector<inversion::InversionResult>& inversions(const inversion::InversionConfig& config, int n,
                                                            const encoder::Encoder& e);

  /// Training wall seconds per artifact, as recorded when each was trained.
  nlohmann::json timings();

 private:
  struct State;
  void log(const std::string& msg) const;
  std::filesystem::path artifact(const std::string& kind, const nlohmann::json& key) const;

  PipelineConfig config_;
  LogFn log_;
  std::unique_ptr<State> state_;
};

struct ExperimentSpec {
  std::string experiment;
  PipelineConfig pipeline = default_pipeline_config();
  std::vector<double> grid;  // lambda_dom values or noise block counts; empty means the default grid
  bool grid_given = false;   // an explicitly empty grid is an error
  int n_images = 20;         // images per cell for the lambda sweep and edit checks
  int n_test = 200;          // reconstruction / precision-recall images
  int n_pairs = 500;         // interpolation pairs
  int n_diffusion_pairs = 10;
  std::vector<double> crop_factors{1.0, 1.5, 2.0};
  std::vector<double> alphas{-3, -2, -1, 0, 1, 2, 3};
  double manipulation_alpha = 2.0;
  inversion::InversionConfig inversion;
  // Optional explicit inputs; validated when present.
  std::optional<std::filesystem::path> boundaries_path;
  std::optional<std::filesystem::path> w_checkpoint;
  std::optional<std::filesystem::path> wplus_checkpoint;
  std::optional<std::uint64_t> seed_with_offset;
  std::optional<std::uint64_t> seed_without_offset;
  std::uint64_t seed = 0;
};

ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);
/// Throws ValidationError (or NotFoundError for missing files) naming the field.
void validate(const ExperimentSpec& spec, int num_layers);

inline constexpr const char* kExperiments[] = {"lambda_sweep",         "noise_sweep", "wspace_compare",
                                               "mean_offset_ablation", "attribute_pr", "full_report"};

struct Cell {
  std::string label;
  std::map<std::string, double> metrics;
  bool failed = false;
  std::string error;
};

struct Verdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Curve {
  std::string name;
  std::string x_label;
  std::string y_label;
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
};

struct ExperimentReport {
  std::string experiment;
  std::vector<Cell> cells;
  nlohmann::json statistics = nlohmann::json::object();
  std::vector<Verdict> verdicts;
  std::vector<Curve> curves;

  bool passed() const;
  const Verdict& verdict(const std::string& name) const;
  const Cell& cell(const std::string& label) const;
  /// Appends another report's cells, curves and verdicts with a name prefix.
  void merge(const ExperimentReport& other, const std::string& prefix);
};

ExperimentReport run_lambda_sweep(const ExperimentSpec& spec, Pipeline& p);
ExperimentReport run_noise_sweep(const ExperimentSpec& spec, Pipeline& p);
ExperimentReport run_wspace_compare(const ExperimentSpec& spec, Pipeline& p);
ExperimentReport run_mean_offset_ablation(const ExperimentSpec& spec, Pipeline& p);
ExperimentReport run_attribute_pr(const ExperimentSpec& spec, Pipeline& p);
/// Encoder vs in-domain inversion vs conventional encoder on the test set,
/// plus the init advantage over random starts.
ExperimentReport run_reconstruction(const ExperimentSpec& spec, Pipeline& p);
/// Oracle monotonicity of edits and interpolation FID of in-domain vs baseline codes.
ExperimentReport run_editing(const ExperimentSpec& spec, Pipeline& p);
ExperimentReport run_diffusion(const ExperimentSpec& spec, Pipeline& p);
/// Training budget and held-out encoder quality of the default pipeline.
ExperimentReport run_training(const ExperimentSpec& spec, Pipeline& p);
/// Everything above in one report.
ExperimentReport run_full_report(const ExperimentSpec& spec, Pipeline& p);
/// Dispatch on spec.experiment.
ExperimentReport run_experiment(const ExperimentSpec& spec, Pipeline& p);

/// Writes <experiment>.csv (one row per cell), <experiment>_verdicts.json and,
/// for "png"/"all", one plot per metric and curve. Format is one of csv,
/// json, png, all. Returns the files written in a fixed order.
std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::filesystem::path& dir,
                                               const std::string& format = "all");
nlohmann::json to_json(const ExperimentReport& report);

/// Minimal CSV reader for files written by emit_report.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

/// Mean per-image Spearman correlation between alpha and the oracle-measured
/// attribute along the boundary; an image whose edits the oracle cannot
/// measure scores 0.
double edit_monotonicity(const std::vector<inversion::InversionResult>& codes, const editing::SemanticBoundary& b,
                         const std::string& attribute, std::span<const double> alphas, const inversion::Models& models);

}  // namespace idinvert::harness
