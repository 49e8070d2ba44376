#include "cfrpn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "cfrpn/checkpoint.hpp"
#include "cfrpn/ops.hpp"
#include "json.hpp"

namespace cfrpn {

namespace fs = std::filesystem;

// -- configuration ----------------------------------------------------------------

const std::vector<std::string>& ExperimentConfig::known_keys() {
    static const std::vector<std::string> keys{
        "arch.mode", "arch.width", "arch.widths", "arch.kernel_sizes", "arch.first_stage_recursive",
        "arch.unroll_depth", "arch.lrn.n", "arch.lrn.k", "arch.lrn.alpha", "arch.lrn.beta", "arch.lrn_on_plain",
        "arch.epsilon", "arch.max_iterations", "arch.per_batch", "arch.normalized_distance", "arch.dropout",
        "arch.dropout_in_recursion", "arch.pool.window", "arch.pool.stride", "arch.pool.padding",
        "train.lr", "train.beta1", "train.beta2", "train.eps", "train.weight_decay", "train.decoupled",
        "train.batch_size", "train.epochs", "train.eval_every", "train.shard_size", "train.threads",
        "train.eval_batch_size", "augment.hflip", "augment.vflip", "augment.rotation", "augment.pad_crop",
        "data.source", "data.dir", "data.train_count", "data.val_count", "data.seed", "data.normalize",
        "data.synth.jitter", "data.synth.min_extent", "data.synth.max_extent", "data.synth.noise",
        "data.raw.train_images", "data.raw.train_labels", "data.raw.val_images", "data.raw.val_labels",
        "run.seeds", "compare.pairs", "gradcheck.tolerance", "trace.split", "trace.checkpoint",
    };
    return keys;
}

namespace {

std::array<std::size_t, kStages> stage_list(const FlatConfig& f, const std::string& key,
                                            const std::array<std::size_t, kStages>& fallback) {
    const auto v = f.get_u64_list(key, {fallback.begin(), fallback.end()});
    if (v.size() != kStages) throw ConfigError(key + ": expected " + std::to_string(kStages) + " comma-separated values");
    std::array<std::size_t, kStages> out{};
    for (std::size_t i = 0; i < kStages; ++i) out[i] = static_cast<std::size_t>(v[i]);
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> parse_pairs(const std::string& text) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("compare.pairs: expected baseline:cfrpn, got '" + item + "'");
        const auto b = parse_u64_list(item.substr(0, colon), "compare.pairs");
        const auto c = parse_u64_list(item.substr(colon + 1), "compare.pairs");
        if (b.size() != 1 || c.size() != 1) throw ConfigError("compare.pairs: malformed entry '" + item + "'");
        out.emplace_back(static_cast<std::size_t>(b[0]), static_cast<std::size_t>(c[0]));
    }
    if (out.empty()) throw ConfigError("compare.pairs: empty list");
    return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_flat(const FlatConfig& f) {
    f.require_known(known_keys());
    ExperimentConfig c;
    c.source = f;
    ArchitectureConfig& a = c.arch;
    a.mode = parse_mode(f.get_string("arch.mode", mode_name(a.mode)));
    if (f.contains("arch.width")) a.widths.fill(f.get_size("arch.width", 0));
    a.widths = stage_list(f, "arch.widths", a.widths);
    a.kernel_sizes = stage_list(f, "arch.kernel_sizes", a.kernel_sizes);
    a.first_stage_recursive = f.get_bool("arch.first_stage_recursive", a.first_stage_recursive);
    a.unroll_depth = f.get_size("arch.unroll_depth", a.unroll_depth);
    a.lrn.n = f.get_size("arch.lrn.n", a.lrn.n);
    a.lrn.k = f.get_double("arch.lrn.k", a.lrn.k);
    a.lrn.alpha = f.get_double("arch.lrn.alpha", a.lrn.alpha);
    a.lrn.beta = f.get_double("arch.lrn.beta", a.lrn.beta);
    a.lrn_on_plain = f.get_bool("arch.lrn_on_plain", a.lrn_on_plain);
    a.convergence.epsilon = f.get_double("arch.epsilon", a.convergence.epsilon);
    a.convergence.max_iterations = f.get_size("arch.max_iterations", a.convergence.max_iterations);
    a.convergence.per_batch = f.get_bool("arch.per_batch", a.convergence.per_batch);
    a.convergence.normalized_distance = f.get_bool("arch.normalized_distance", a.convergence.normalized_distance);
    a.dropout_rate = f.get_double("arch.dropout", a.dropout_rate);
    a.dropout_in_recursion = f.get_bool("arch.dropout_in_recursion", a.dropout_in_recursion);
    const std::size_t window = f.get_size("arch.pool.window", a.pool.window_h);
    a.pool.window_h = window;
    a.pool.window_w = window;
    a.pool.stride = f.get_size("arch.pool.stride", a.pool.stride);
    a.pool.padding = f.get_size("arch.pool.padding", a.pool.padding);

    TrainConfig& t = c.train;
    t.adam.lr = f.get_double("train.lr", t.adam.lr);
    t.adam.beta1 = f.get_double("train.beta1", t.adam.beta1);
    t.adam.beta2 = f.get_double("train.beta2", t.adam.beta2);
    t.adam.eps = f.get_double("train.eps", t.adam.eps);
    t.adam.weight_decay = f.get_double("train.weight_decay", t.adam.weight_decay);
    t.adam.decoupled = f.get_bool("train.decoupled", t.adam.decoupled);
    t.batch_size = f.get_size("train.batch_size", t.batch_size);
    t.epochs = f.get_size("train.epochs", t.epochs);
    t.eval_every = f.get_size("train.eval_every", t.eval_every);
    t.shard_size = f.get_size("train.shard_size", t.shard_size);
    t.threads = f.get_size("train.threads", t.threads);
    t.eval_batch_size = f.get_size("train.eval_batch_size", t.eval_batch_size);
    t.augment.horizontal_flip = f.get_double("augment.hflip", t.augment.horizontal_flip);
    t.augment.vertical_flip = f.get_double("augment.vflip", t.augment.vertical_flip);
    t.augment.rotation_degrees = f.get_double("augment.rotation", t.augment.rotation_degrees);
    t.augment.pad_crop = f.get_size("augment.pad_crop", t.augment.pad_crop);

    DataConfig& d = c.data;
    d.source = f.get_string("data.source", d.source);
    if (d.source != "synth" && d.source != "cifar10" && d.source != "raw") {
        throw ConfigError("data.source: expected synth, cifar10 or raw, got '" + d.source + "'");
    }
    d.dir = f.get_string("data.dir", d.dir.string());
    d.train_count = f.get_size("data.train_count", d.train_count);
    d.val_count = f.get_size("data.val_count", d.val_count);
    d.seed = f.get_u64("data.seed", d.seed);
    d.normalize = f.get_bool("data.normalize", d.normalize);
    d.synth.position_jitter = f.get_double("data.synth.jitter", d.synth.position_jitter);
    d.synth.min_half_extent = f.get_double("data.synth.min_extent", d.synth.min_half_extent);
    d.synth.max_half_extent = f.get_double("data.synth.max_extent", d.synth.max_half_extent);
    d.synth.noise_stddev = f.get_double("data.synth.noise", d.synth.noise_stddev);
    d.raw_train_images = f.get_string("data.raw.train_images", d.raw_train_images);
    d.raw_train_labels = f.get_string("data.raw.train_labels", d.raw_train_labels);
    d.raw_val_images = f.get_string("data.raw.val_images", d.raw_val_images);
    d.raw_val_labels = f.get_string("data.raw.val_labels", d.raw_val_labels);

    c.seeds = f.get_u64_list("run.seeds", c.seeds);
    if (const auto p = f.find("compare.pairs")) c.pairs = parse_pairs(*p);
    c.gradcheck_tolerance = f.get_double("gradcheck.tolerance", c.gradcheck_tolerance);
    c.trace_split = f.get_string("trace.split", c.trace_split);
    if (c.trace_split != "train" && c.trace_split != "val") throw ConfigError("trace.split: expected train or val");
    c.trace_checkpoint = f.get_string("trace.checkpoint", "");

    if (d.source == "synth") a.num_classes = 3;
    if (d.source == "cifar10") a.num_classes = 10;
    try {
        a.validate();
        t.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

std::uint64_t config_hash(const FlatConfig& flat) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : flat.canonical()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// -- data ---------------------------------------------------------------------------

LoadedData load_data(const DataConfig& c) {
    LoadedData out;
    if (c.source == "synth") {
        out.train = synth_shapes(c.train_count, derive_seed(c.seed, {1}), c.synth);
        out.val = synth_shapes(c.val_count, derive_seed(c.seed, {2}), c.synth);
    } else if (c.source == "cifar10") {
        if (c.dir.empty()) throw ConfigError("data.dir is required for cifar10");
        CifarSplits s = load_cifar10(c.dir);
        out.train = s.train.head(c.train_count);
        out.val = s.test.head(c.val_count);
    } else {
        if (c.dir.empty()) throw ConfigError("data.dir is required for raw data");
        Dataset all = read_raw_dataset(c.dir / c.raw_train_images, c.dir / c.raw_train_labels);
        if (!c.raw_val_images.empty()) {
            out.train = all.head(c.train_count);
            out.val = read_raw_dataset(c.dir / c.raw_val_images, c.dir / c.raw_val_labels).head(c.val_count);
        } else {
            if (c.val_count >= all.size()) throw ConfigError("data.val_count leaves no training data");
            TrainValSplit s = split_train_val(all, c.val_count, derive_seed(c.seed, {3}));
            out.train = s.train.head(c.train_count);
            out.val = std::move(s.val);
        }
    }
    if (out.train.size() == 0) throw ConfigError("training set is empty");
    if (c.normalize) out.normalizer = Normalizer::fit(out.train);
    return out;
}

// -- training -----------------------------------------------------------------------

double RunResult::final_train_acc() const { return history.empty() ? 0.0 : history.back().train_acc; }

double RunResult::final_val_acc() const {
    if (history.empty() || !history.back().val) return std::nan("");
    return history.back().val->accuracy;
}

std::string metrics_csv_header() {
    return "seed,epoch,train_loss,train_acc,val_acc,mean_depth_stage2,mean_depth_stage3,mean_depth_stage4\n";
}

std::string metrics_csv_row(std::uint64_t seed, const EpochMetrics& m, const ArchitectureConfig& arch) {
    std::string row = std::to_string(seed) + "," + std::to_string(m.epoch) + "," + format_double(m.train_loss) + "," +
                      format_double(m.train_acc) + ",";
    if (m.val) row += format_double(m.val->accuracy);
    for (std::size_t s = 1; s < kStages; ++s) {
        row += ",";
        if (!m.val) continue;
        if (!arch.stage_recursive(s)) {
            row += "1";
        } else if (m.val->depth[s]) {
            row += format_double(m.val->depth[s]->mean);
        }
    }
    return row + "\n";
}

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::string model_label(Mode m, std::size_t width) { return std::string(mode_name(m)) + "-w" + std::to_string(width); }

}  // namespace

RunResult train_one(const ArchitectureConfig& arch, const TrainConfig& train, const LoadedData& data,
                    std::uint64_t seed, const fs::path& dir, std::ostream& log) {
    fs::create_directories(dir);
    ArchitectureConfig a = arch;
    a.num_classes = data.train.num_classes;
    a.in_channels = data.train.channels;
    a.in_height = data.train.height;
    a.in_width = data.train.width;
    Model<float> model = Model<float>::build(a, derive_seed(seed, {0x3de1}));
    TrainConfig tc = train;
    tc.seed = seed;
    Trainer trainer(model, tc);

    RunResult r;
    r.seed = seed;
    r.width = a.widths[0];
    r.mode = a.mode;
    r.parameters = model.params().element_count();

    auto metrics = open_out(dir / "metrics.csv");
    auto timing = open_out(dir / "timing.csv");
    metrics << metrics_csv_header();
    timing << "seed,epoch,wall_s\n";
    const Normalizer* norm = data.normalizer.empty() ? nullptr : &data.normalizer;
    r.history = trainer.fit(data.train, &data.val, norm, [&](const EpochMetrics& m) {
        metrics << metrics_csv_row(seed, m, a) << std::flush;
        timing << seed << "," << m.epoch << "," << format_double(m.wall_seconds) << "\n" << std::flush;
        save_checkpoint(dir / "checkpoint.cfrp", model.params(), &trainer.optimizer());
        log << model_label(a.mode, r.width) << " seed " << seed << " epoch " << m.epoch << ": loss "
            << format_double(m.train_loss) << " train_acc " << format_double(m.train_acc);
        if (m.val) log << " val_acc " << format_double(m.val->accuracy);
        log << " (" << format_double(m.wall_seconds) << " s)" << std::endl;
    });
    r.trace_violation = trainer.trace_violation();
    return r;
}

std::vector<RunResult> run_training(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
    if (config.seeds.empty()) throw ConfigError("train: seed list is empty");
    const LoadedData data = load_data(config.data);
    std::vector<RunResult> runs;
    for (std::uint64_t seed : config.seeds) {
        runs.push_back(train_one(config.arch, config.train, data, seed, out / ("seed_" + std::to_string(seed)), log));
    }
    return runs;
}

// -- comparison -----------------------------------------------------------------

ModelSummary summarize(std::size_t baseline_width, const std::vector<RunResult>& runs) {
    ModelSummary s;
    s.baseline_width = baseline_width;
    s.runs = runs.size();
    if (runs.empty()) return s;
    s.mode = runs[0].mode;
    s.width = runs[0].width;
    s.parameters = runs[0].parameters;
    s.val_min = runs[0].final_val_acc();
    s.val_max = runs[0].final_val_acc();
    for (const auto& r : runs) {
        s.val_mean += r.final_val_acc();
        s.train_mean += r.final_train_acc();
        s.val_min = std::min(s.val_min, r.final_val_acc());
        s.val_max = std::max(s.val_max, r.final_val_acc());
    }
    const double n = static_cast<double>(runs.size());
    s.val_mean /= n;
    s.train_mean /= n;
    double var = 0.0;
    for (const auto& r : runs) var += (r.final_val_acc() - s.val_mean) * (r.final_val_acc() - s.val_mean);
    // sample standard deviation across seeds
    s.val_std = runs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    return s;
}

std::vector<PairResult> run_compare(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
    if (config.seeds.empty()) throw ConfigError("compare: seed list is empty");
    fs::create_directories(out);
    const LoadedData data = load_data(config.data);
    std::vector<PairResult> results;
    for (const auto& [bw, cw] : config.pairs) {
        PairResult p;
        p.baseline_width = bw;
        p.cfrpn_width = cw;
        const fs::path pair_dir = out / ("pair_" + std::to_string(bw) + "_" + std::to_string(cw));
        for (std::uint64_t seed : config.seeds) {
            ArchitectureConfig base = config.arch;
            base.mode = Mode::baseline;
            base.widths.fill(bw);
            p.baseline.push_back(train_one(base, config.train, data, seed,
                                           pair_dir / "baseline" / ("seed_" + std::to_string(seed)), log));
            ArchitectureConfig rec = config.arch;
            if (rec.mode == Mode::baseline) rec.mode = Mode::cfrpn;
            rec.widths.fill(cw);
            p.cfrpn.push_back(train_one(rec, config.train, data, seed,
                                        pair_dir / mode_name(rec.mode) / ("seed_" + std::to_string(seed)), log));
        }
        p.baseline_summary = summarize(bw, p.baseline);
        p.cfrpn_summary = summarize(bw, p.cfrpn);
        log << "pair " << bw << "/" << cw << ": baseline " << format_double(p.baseline_summary.val_mean) << ", "
            << mode_name(p.cfrpn_summary.mode) << " " << format_double(p.cfrpn_summary.val_mean) << ", gap "
            << format_double(p.gap()) << std::endl;
        results.push_back(std::move(p));
    }

    auto summary = open_out(out / "summary.csv");
    summary << "baseline_width,model,width,params,runs,val_acc_mean,val_acc_std,val_acc_min,val_acc_max,"
               "train_acc_mean,gap_vs_baseline\n";
    auto runs = open_out(out / "runs.csv");
    runs << "baseline_width,model,width,seed,final_train_acc,final_val_acc\n";
    auto curves = open_out(out / "curves.csv");
    curves << "baseline_width,model,width,seed,epoch,train_loss,train_acc,val_acc\n";
    for (const auto& p : results) {
        for (const ModelSummary* s : {&p.baseline_summary, &p.cfrpn_summary}) {
            const double gap = s == &p.cfrpn_summary ? p.gap() : 0.0;
            summary << p.baseline_width << "," << mode_name(s->mode) << "," << s->width << "," << s->parameters << ","
                    << s->runs << "," << format_double(s->val_mean) << "," << format_double(s->val_std) << ","
                    << format_double(s->val_min) << "," << format_double(s->val_max) << ","
                    << format_double(s->train_mean) << "," << format_double(gap) << "\n";
        }
        for (const auto* group : {&p.baseline, &p.cfrpn}) {
            for (const auto& r : *group) {
                runs << p.baseline_width << "," << mode_name(r.mode) << "," << r.width << "," << r.seed << ","
                     << format_double(r.final_train_acc()) << "," << format_double(r.final_val_acc()) << "\n";
                for (const auto& m : r.history) {
                    curves << p.baseline_width << "," << mode_name(r.mode) << "," << r.width << "," << r.seed << ","
                           << m.epoch << "," << format_double(m.train_loss) << "," << format_double(m.train_acc)
                           << ",";
                    if (m.val) curves << format_double(m.val->accuracy);
                    curves << "\n";
                }
            }
        }
    }

    nlohmann::json manifest;
    manifest["config_hash"] = hex64(config_hash(config.source));
    manifest["config"] = config.source.values();
    manifest["seeds"] = config.seeds;
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [bw, cw] : config.pairs) pairs.push_back({bw, cw});
    manifest["pairs"] = pairs;
    manifest["code_version"] = CFRPN_VERSION;
    manifest["files"] = {"summary.csv", "runs.csv", "curves.csv"};
    auto mf = open_out(out / "manifest.json");
    mf << manifest.dump(2) << "\n";
    return results;
}

// -- gradient checks ------------------------------------------------------------

namespace {

Tensor<double> random_tensor(Shape s, SeededRng& rng, double scale = 1.0) {
    Tensor<double> t(s);
    for (double& v : t.data()) v = rng.normal(0.0, scale);
    return t;
}

// Cross-entropy of a fixed random projection of `y` to three classes: a smooth scalar
// whose gradient reaches every element of y.
NodeId projected_loss(Tape<double>& tape, NodeId y, std::uint64_t seed) {
    const Shape& s = tape.value(y).shape();
    SeededRng rng(seed);
    const NodeId w = tape.constant(random_tensor(Shape{3, s.per_sample(), 1, 1}, rng, 0.5));
    std::vector<int> labels(s.n);
    for (std::size_t i = 0; i < s.n; ++i) labels[i] = static_cast<int>(i % 3);
    return ops::softmax_cross_entropy(tape, ops::linear(tape, y, w, std::nullopt), labels);
}

GradcheckRow check(const std::string& layer, const TapeFunction& f, const ParamStore<double>& params, double tol) {
    const GradCheckReport r = grad_check(f, params);
    return {layer, r.max_rel_error, r.checked, r.max_rel_error <= tol};
}

}  // namespace

std::vector<GradcheckRow> run_gradchecks(double tol) {
    std::vector<GradcheckRow> rows;
    SeededRng rng(0x9c4ec);
    const Shape in_shape{2, 3, 6, 6};

    {
        ParamStore<double> ps;
        const ParamId x = ps.add("input", random_tensor(in_shape, rng));
        const ParamId k = ps.add("kernel", random_tensor(Shape{4, 3, 3, 3}, rng, 0.3));
        const ParamId b = ps.add("bias", random_tensor(Shape{4, 1, 1, 1}, rng, 0.1), false);
        rows.push_back(check("conv2d", [=](Tape<double>& t, const ParamStore<double>& p) {
            const NodeId y = ops::conv2d(t, t.parameter(x, p[x].value), t.parameter(k, p[k].value),
                                         t.parameter(b, p[b].value), ConvSpec::same(3, 3));
            return projected_loss(t, y, 1);
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        const ParamId x = ps.add("input", random_tensor(in_shape, rng));
        rows.push_back(check("maxpool", [=](Tape<double>& t, const ParamStore<double>& p) {
            const NodeId y = ops::maxpool(t, t.parameter(x, p[x].value), PoolSpec{3, 3, 2, 1});
            return projected_loss(t, y, 2);
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        Tensor<double> v = random_tensor(in_shape, rng);
        // keep inputs away from the kink so the central difference is valid
        for (double& e : v.data()) e = e >= 0 ? e + 0.05 : e - 0.05;
        const ParamId x = ps.add("input", std::move(v));
        rows.push_back(check("relu", [=](Tape<double>& t, const ParamStore<double>& p) {
            return projected_loss(t, ops::relu(t, t.parameter(x, p[x].value)), 3);
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        const ParamId x = ps.add("input", random_tensor(Shape{2, 7, 3, 3}, rng, 3.0));
        // a strong alpha so the cross-channel term is exercised
        const LrnSpec spec{5, 1.0, 0.5, 0.75};
        rows.push_back(check("lrn", [=](Tape<double>& t, const ParamStore<double>& p) {
            return projected_loss(t, ops::lrn(t, t.parameter(x, p[x].value), spec), 4);
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        const ParamId x = ps.add("input", random_tensor(Shape{3, 2, 2, 2}, rng));
        const ParamId w = ps.add("weights", random_tensor(Shape{5, 8, 1, 1}, rng, 0.5));
        const ParamId b = ps.add("bias", random_tensor(Shape{5, 1, 1, 1}, rng, 0.1), false);
        rows.push_back(check("linear", [=](Tape<double>& t, const ParamStore<double>& p) {
            const NodeId y = ops::linear(t, t.parameter(x, p[x].value), t.parameter(w, p[w].value),
                                         t.parameter(b, p[b].value));
            return projected_loss(t, y, 5);
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        const ParamId z = ps.add("logits", random_tensor(Shape{4, 6, 1, 1}, rng, 2.0));
        rows.push_back(check("softmax_xent", [=](Tape<double>& t, const ParamStore<double>& p) {
            return ops::softmax_cross_entropy(t, t.parameter(z, p[z].value), std::vector<int>{0, 5, 2, 3});
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        const std::size_t m = 4;
        const std::size_t n = 5;
        const ParamId alpha = ps.add("alpha", random_tensor(Shape{n, m, 1, 1}, rng, 0.5));
        const ParamId beta = ps.add("beta", random_tensor(Shape{n, n, 1, 1}, rng, 0.3));
        const ParamId bias = ps.add("bias", random_tensor(Shape{n, 1, 1, 1}, rng, 0.1), false);
        const ParamId u = ps.add("input", random_tensor(Shape{3, m, 1, 1}, rng));
        const ConvergenceConfig conv{};
        // freeze the realized per-sample depths of an unperturbed pass
        Tape<double> probe;
        const auto r0 = frpn_dense_forward<double>(probe, probe.parameter(alpha, ps[alpha].value),
                                                   probe.parameter(beta, ps[beta].value),
                                                   probe.parameter(bias, ps[bias].value), Activation::sigmoid,
                                                   probe.parameter(u, ps[u].value),
                                                   probe.constant(Tensor<double>(Shape{3, n, 1, 1})), conv);
        const FrozenDepths depths = r0.trace.depths();
        rows.push_back(check("frpn_dense_forward", [=](Tape<double>& t, const ParamStore<double>& p) {
            const auto r = frpn_dense_forward<double>(t, t.parameter(alpha, p[alpha].value),
                                                      t.parameter(beta, p[beta].value), t.parameter(bias, p[bias].value),
                                                      Activation::sigmoid, t.parameter(u, p[u].value),
                                                      t.constant(Tensor<double>(Shape{3, n, 1, 1})), conv, &depths);
            return projected_loss(t, r.state, 6);
        }, ps, tol));
    }
    {
        ParamStore<double> ps;
        SeededRng init(0x1a7e);
        const CfrpnConvLayer layer = make_cfrpn_layer(ps, "cfrpn", 2, 3, 3, LrnSpec{}, ConvergenceConfig{}, init);
        const ParamId u = ps.add("input", random_tensor(Shape{2, 2, 5, 5}, rng));
        Tape<double> probe;
        const auto r0 = cfrpn_conv_forward(probe, ps, layer, probe.parameter(u, ps[u].value));
        const FrozenDepths depths = r0.trace.depths();
        rows.push_back(check("cfrpn_conv_forward", [=](Tape<double>& t, const ParamStore<double>& p) {
            RecursionOptions o;
            o.frozen = &depths;
            const auto r = cfrpn_conv_forward(t, p, layer, t.parameter(u, p[u].value), o);
            return projected_loss(t, r.state, 7);
        }, ps, tol));
    }
    return rows;
}

// -- parameter table ------------------------------------------------------------

const std::vector<std::pair<std::size_t, std::size_t>>& reference_width_pairs() {
    static const std::vector<std::pair<std::size_t, std::size_t>> pairs{
        {135, 96}, {120, 85}, {104, 74}, {85, 60}, {42, 30}, {21, 15}};
    return pairs;
}

std::vector<ParamRow> params_table(const ArchitectureConfig& templ) {
    std::vector<ParamRow> rows;
    for (const auto& [bw, cw] : reference_width_pairs()) {
        ParamRow r;
        r.baseline_width = bw;
        r.reference_cfrpn_width = cw;
        ArchitectureConfig b = templ;
        b.mode = Mode::baseline;
        b.widths.fill(bw);
        r.baseline_params = count_parameters(b);
        ArchitectureConfig c = templ;
        c.mode = Mode::cfrpn;
        c.widths.fill(cw);
        r.reference_cfrpn_params = count_parameters(c);
        r.matched_width = match_width(bw, templ);
        c.widths.fill(r.matched_width);
        r.matched_params = count_parameters(c);
        r.relative_gap = std::abs(static_cast<double>(r.reference_cfrpn_params) - static_cast<double>(r.baseline_params)) /
                         static_cast<double>(r.baseline_params);
        rows.push_back(r);
    }
    return rows;
}

// -- traces -----------------------------------------------------------------------

std::vector<TraceRow> collect_traces(const Model<float>& model, const Dataset& data, const Normalizer* normalizer,
                                     std::size_t batch_size, std::uint64_t seed) {
    BatchOptions bo;
    bo.batch_size = batch_size;
    bo.shuffle = false;
    bo.normalizer = normalizer;
    const BatchSequence seq(data, bo);
    std::vector<TraceRow> rows;
    for (std::size_t b = 0; b < seq.size(); ++b) {
        const Batch batch = seq[b];
        Tape<float> tape;
        const auto fwd = model.forward(tape, tape.constant(batch.images));
        for (std::size_t s = 0; s < kStages; ++s) {
            if (!fwd.traces.stages[s]) continue;
            const auto& samples = fwd.traces.stages[s]->samples;
            for (std::size_t i = 0; i < samples.size(); ++i) rows.push_back({seed, s + 1, batch.ids[i], samples[i]});
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const TraceRow& a, const TraceRow& b) {
        return a.sample != b.sample ? a.sample < b.sample : a.stage < b.stage;
    });
    return rows;
}

std::vector<TraceRow> run_trace(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
    if (config.trace_checkpoint.empty()) throw ConfigError("trace: trace.checkpoint is required");
    const LoadedData data = load_data(config.data);
    const Dataset& split = config.trace_split == "train" ? data.train : data.val;
    ArchitectureConfig a = config.arch;
    a.num_classes = data.train.num_classes;
    a.in_channels = data.train.channels;
    a.in_height = data.train.height;
    a.in_width = data.train.width;
    if (a.mode == Mode::baseline) throw ConfigError("trace: baseline models have no recursive stages");
    Model<float> model = Model<float>::build(a, 0);
    apply_checkpoint(load_checkpoint(config.trace_checkpoint), model.params());
    const std::uint64_t seed = config.seeds.empty() ? 0 : config.seeds.front();
    const Normalizer* norm = data.normalizer.empty() ? nullptr : &data.normalizer;
    auto rows = collect_traces(model, split, norm, config.train.eval_batch_size, seed);

    fs::create_directories(out);
    auto csv = open_out(out / "trace.csv");
    csv << "seed,stage,sample,t_star,stop_reason,final_distance\n";
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> hist;
    for (const auto& r : rows) {
        csv << r.seed << "," << r.stage << "," << r.sample << "," << r.trace.t_star << "," << stop_reason_name(r.trace.reason)
            << "," << format_double(r.trace.final_distance()) << "\n";
        ++hist[{r.stage, r.trace.t_star}];
    }
    auto h = open_out(out / "trace_histogram.csv");
    h << "stage,t_star,count,fraction\n";
    const double per_stage = split.size() ? static_cast<double>(split.size()) : 1.0;
    for (const auto& [key, count] : hist) {
        h << key.first << "," << key.second << "," << count << "," << format_double(static_cast<double>(count) / per_stage)
          << "\n";
    }
    log << "traced " << split.size() << " samples over " << hist.size() << " (stage, depth) cells" << std::endl;
    return rows;
}

}  // namespace cfrpn
