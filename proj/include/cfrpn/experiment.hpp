#pragma once

// Experiment drivers behind the command-line subcommands. Every data file they write
// is a pure function of the configuration and seeds; wall-clock times go to separate
// timing files and the log stream.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "cfrpn/config.hpp"
#include "cfrpn/data.hpp"
#include "cfrpn/model.hpp"
#include "cfrpn/train.hpp"

namespace cfrpn {

struct DataConfig {
    /// synth, cifar10 or raw
    std::string source = "synth";
    std::filesystem::path dir;
    std::size_t train_count = 6000;
    std::size_t val_count = 1200;
    std::uint64_t seed = 20170;
    bool normalize = true;
    SynthOptions synth;
    /// Raw-format file names, relative to `dir`. Without validation files the validation
    /// set is split off the training files.
    std::string raw_train_images = "train_images.cfrt";
    std::string raw_train_labels = "train_labels.cfrl";
    std::string raw_val_images;
    std::string raw_val_labels;
};

struct ExperimentConfig {
    ArchitectureConfig arch;
    TrainConfig train;
    DataConfig data;
    std::vector<std::uint64_t> seeds{1};
    /// (baseline width, C-FRPN width) pairs for compare.
    std::vector<std::pair<std::size_t, std::size_t>> pairs{{21, 15}};
    double gradcheck_tolerance = 1e-5;
    /// train or val
    std::string trace_split = "val";
    std::filesystem::path trace_checkpoint;
    FlatConfig source;

    static ExperimentConfig from_flat(const FlatConfig& flat);
    static const std::vector<std::string>& known_keys();
};

/// 64-bit FNV-1a of the canonical configuration text.
std::uint64_t config_hash(const FlatConfig& flat);
std::string hex64(std::uint64_t v);

struct LoadedData {
    Dataset train;
    Dataset val;
    Normalizer normalizer;
};

LoadedData load_data(const DataConfig& config);

struct RunResult {
    std::uint64_t seed = 0;
    std::size_t width = 0;
    Mode mode = Mode::cfrpn;
    std::size_t parameters = 0;
    std::vector<EpochMetrics> history;
    std::optional<std::string> trace_violation;

    double final_train_acc() const;
    /// Validation accuracy after the last epoch.
    double final_val_acc() const;
};

/// Header and rows of metrics.csv. Depth columns hold 1 for plain stages and are empty
/// on epochs without evaluation.
std::string metrics_csv_header();
std::string metrics_csv_row(std::uint64_t seed, const EpochMetrics& m, const ArchitectureConfig& arch);

/// Trains one model; writes metrics.csv, timing.csv and checkpoint.cfrp under `dir`
/// (the checkpoint after every epoch, so a divergence leaves the last good one).
RunResult train_one(const ArchitectureConfig& arch, const TrainConfig& train, const LoadedData& data,
                    std::uint64_t seed, const std::filesystem::path& dir, std::ostream& log);

/// One run per seed under out/seed_<s>/.
std::vector<RunResult> run_training(const ExperimentConfig& config, const std::filesystem::path& out,
                                    std::ostream& log);

struct ModelSummary {
    std::size_t baseline_width = 0;
    Mode mode = Mode::cfrpn;
    std::size_t width = 0;
    std::size_t parameters = 0;
    std::size_t runs = 0;
    double val_mean = 0.0;
    double val_std = 0.0;
    double val_min = 0.0;
    double val_max = 0.0;
    double train_mean = 0.0;
};

struct PairResult {
    std::size_t baseline_width = 0;
    std::size_t cfrpn_width = 0;
    std::vector<RunResult> baseline;
    std::vector<RunResult> cfrpn;
    ModelSummary baseline_summary;
    ModelSummary cfrpn_summary;
    /// mean C-FRPN minus mean baseline validation accuracy
    double gap() const { return cfrpn_summary.val_mean - baseline_summary.val_mean; }
};

ModelSummary summarize(std::size_t baseline_width, const std::vector<RunResult>& runs);

/// Both models per width pair with shared seeds; writes summary.csv, runs.csv, curves.csv
/// and manifest.json under `out`, plus per-run directories.
std::vector<PairResult> run_compare(const ExperimentConfig& config, const std::filesystem::path& out,
                                    std::ostream& log);

struct GradcheckRow {
    std::string layer;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Central-difference checks of every layer type in double precision.
std::vector<GradcheckRow> run_gradchecks(double tolerance);

struct ParamRow {
    std::size_t baseline_width = 0;
    std::size_t baseline_params = 0;
    std::size_t reference_cfrpn_width = 0;
    std::size_t reference_cfrpn_params = 0;
    std::size_t matched_width = 0;
    std::size_t matched_params = 0;
    /// |cfrpn - baseline| / baseline at the reference width
    double relative_gap = 0.0;
};

/// The six reference width pairs used throughout the experiments.
const std::vector<std::pair<std::size_t, std::size_t>>& reference_width_pairs();
std::vector<ParamRow> params_table(const ArchitectureConfig& templ);

struct TraceRow {
    std::uint64_t seed = 0;
    std::size_t stage = 0;  // 1-based
    std::size_t sample = 0;
    SampleTrace trace;
};

/// Per-sample traces of every recursive stage over a dataset, in inference mode.
std::vector<TraceRow> collect_traces(const Model<float>& model, const Dataset& data, const Normalizer* normalizer,
                                     std::size_t batch_size, std::uint64_t seed);

/// Loads config.trace_checkpoint into the configured architecture and writes trace.csv
/// and trace_histogram.csv under `out`.
std::vector<TraceRow> run_trace(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& log);

std::string format_double(double v);

}  // namespace cfrpn
