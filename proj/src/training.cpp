#include "iip/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace iip {

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (workers == 0) throw ConfigError("workers must be >= 1");
    try {
        augment.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

namespace {

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double d = std::stod(value, &used);
        if (used == value.size()) return d;
    } catch (const std::logic_error&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
}

std::size_t to_size(const std::string& key, const std::string& value) {
    if (value.empty() || !std::all_of(value.begin(), value.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + value + "'");
    }
    return std::stoull(value);
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "on" || value == "1") return true;
    if (value == "false" || value == "off" || value == "0") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + value + "'");
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
    if (key == "epochs") epochs = to_size(key, value);
    else if (key == "batch_size") batch_size = to_size(key, value);
    else if (key == "lr") lr = to_double(key, value);
    else if (key == "momentum") momentum = to_double(key, value);
    else if (key == "weight_decay") weight_decay = to_double(key, value);
    else if (key == "cosine") cosine = to_bool(key, value);
    else if (key == "seed") seed = to_size(key, value);
    else if (key == "workers") workers = to_size(key, value);
    else if (key == "modality") {
        try {
            modality = parse_modality(value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    } else if (key == "augment.rotation") augment.rotation = to_bool(key, value);
    else if (key == "augment.angle_bound") augment.angle_bound = to_double(key, value);
    else if (key == "augment.part_mask") augment.part_mask = to_bool(key, value);
    else if (key == "augment.part_mask_prob") augment.part_mask_prob = to_double(key, value);
    else if (key == "augment.noise_sigma") augment.noise_sigma = to_double(key, value);
    else if (key == "augment.joint_mask") augment.joint_mask = to_size(key, value);
    else throw ConfigError("unknown train config key '" + key + "'");
}

TrainConfig TrainConfig::paper_schedule() {
    TrainConfig c;
    c.epochs = 300;
    c.batch_size = 64;
    c.lr = 0.1;
    return c;
}

void sgd_step(ParamSet& params, double lr, double momentum, double weight_decay, SgdState& state) {
    for (const Parameter& p : params) {
        if (p.trainable() && !p.grad.all_finite()) {
            throw NonFiniteError("sgd_step: non-finite gradient in parameter '" + p.name + "'");
        }
    }
    if (state.velocity.size() != params.size()) {
        state.velocity.clear();
        for (const Parameter& p : params) state.velocity.emplace_back(p.value.shape());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.trainable()) continue;
        const double wd = p.kind == ParamKind::weight ? weight_decay : 0.0;
        Tensor& v = state.velocity[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            v[j] = momentum * v[j] + p.grad[j] + wd * p.value[j];
            p.value[j] -= lr * v[j];
        }
    }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) return base_lr;
    const double progress = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string EpochRecord::format() const {
    std::ostringstream os;
    os << "epoch=" << epoch << " lr=" << std::setprecision(8) << lr << " loss=" << loss << " acc=" << acc;
    return os.str();
}

LoadedDataset load_dataset(const DatasetManifest& manifest) {
    LoadedDataset data;
    for (const auto& e : manifest.entries) {
        SkeletonSequence seq = load_sequence(manifest.resolve(e));
        seq.label = e.label;
        data.samples.push_back(std::move(seq));
        data.ids.push_back(std::filesystem::path(e.path).filename().string());
    }
    return data;
}

SkeletonSequence prepare_sample(const SkeletonSequence& raw, const ModelConfig& model, Modality modality,
                                const AugmentConfig& augment, SampleMode mode, Rng& rng) {
    SkeletonSequence seq = mode == SampleMode::train ? augment_sequence(raw, augment, rng) : raw;
    seq = resample_frames(seq, model.frames, mode, &rng);
    return derive_modality(seq, modality, SkeletonLayout::ntu25());
}

double accumulate_gradients(ModelParams& params, std::span<const SkeletonSequence> batch,
                            const ForwardOptions& options) {
    Tape tape;
    Bound bound(tape, params.set);
    Var logits = forward(bound, params, batch, options);
    std::vector<std::size_t> labels;
    for (const auto& s : batch) labels.push_back(s.label);
    Var loss = cross_entropy(logits, labels);
    tape.backward(loss);
    bound.accumulate_grads();
    return loss.value().item();
}

namespace {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// handled by exactly one call, so per-index outputs are deterministic.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t threads = std::min(workers, n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += threads) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void check_labels(const LoadedDataset& data, std::size_t num_classes) {
    if (data.samples.empty()) throw std::invalid_argument("empty manifest");
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        if (data.samples[i].label >= num_classes) {
            throw std::invalid_argument("sample " + data.ids[i] + " has label " +
                                        std::to_string(data.samples[i].label) + " >= num_classes " +
                                        std::to_string(num_classes));
        }
    }
}

}  // namespace

TrainResult train(const LoadedDataset& data, const ModelConfig& model, const TrainConfig& config, std::ostream* log) {
    model.validate();
    config.validate();
    check_labels(data, model.num_classes);

    TrainResult result{init_params(model, config.seed), {}};
    ModelParams& params = result.params;
    const std::size_t n = data.samples.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const std::size_t parts = model.partition_map().part_count();
    SgdState state;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle = derive_stream(config.seed ^ 0x5eed5eedULL, epoch);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle);

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = config.cosine ? cosine_lr(step, total_steps, config.lr) : config.lr;
        double loss_sum = 0.0;
        std::size_t correct = 0;

        for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
            const std::size_t count = std::min(config.batch_size, n - start);
            std::vector<SkeletonSequence> batch(count);
            std::vector<std::ptrdiff_t> masks(count);
            parallel_for(count, config.workers, [&](std::size_t i) {
                const std::size_t sample = order[start + i];
                Rng rng = derive_stream(config.seed, (epoch + 1) * 0x100000000ULL + sample);
                batch[i] = prepare_sample(data.samples[sample], model, config.modality, config.augment,
                                          SampleMode::train, rng);
                masks[i] = choose_part_mask(config.augment, parts, rng);
            });

            ForwardOptions opts;
            opts.training = true;
            opts.part_mask = masks;
            Rng dropout_rng = derive_stream(config.seed ^ 0xd409u, step);
            opts.rng = &dropout_rng;

            params.set.zero_grad();
            Tape tape;
            Bound bound(tape, params.set);
            Var logits = forward(bound, params, batch, opts);
            std::vector<std::size_t> labels;
            for (const auto& s : batch) labels.push_back(s.label);
            Var loss = cross_entropy(logits, labels);
            tape.backward(loss);
            bound.accumulate_grads();

            const double lr = config.cosine ? cosine_lr(step, total_steps, config.lr) : config.lr;
            sgd_step(params.set, lr, config.momentum, config.weight_decay, state);

            loss_sum += loss.value().item() * static_cast<double>(count);
            const Tensor& z = logits.value();
            for (std::size_t i = 0; i < count; ++i) {
                if (argmax(std::span<const double>(z.data() + i * z.cols(), z.cols())) == labels[i]) ++correct;
            }
        }
        rec.loss = loss_sum / static_cast<double>(n);
        rec.acc = static_cast<double>(correct) / static_cast<double>(n);
        result.log.push_back(rec);
        if (log) *log << rec.format() << '\n' << std::flush;
    }
    return result;
}

TrainResult train(const DatasetManifest& manifest, const ModelConfig& model, const TrainConfig& config,
                  std::ostream* log) {
    if (manifest.entries.empty()) throw std::invalid_argument("empty manifest");
    return train(load_dataset(manifest), model, config, log);
}

// ---------------------------------------------------------------------------

void EvalReport::print(std::ostream& os) const {
    os << "samples=" << samples << " accuracy=" << std::setprecision(6) << accuracy << " loss=" << loss << '\n';
    for (std::size_t k = 0; k < per_class.size(); ++k) {
        os << "class " << k << " accuracy=" << per_class[k] << '\n';
    }
    os << "confusion (rows: true, cols: predicted)\n";
    for (const auto& row : confusion) {
        for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "") << row[j];
        os << '\n';
    }
}

EvalReport report_from_probabilities(const std::vector<std::size_t>& labels,
                                     const std::vector<std::vector<double>>& probs) {
    if (labels.size() != probs.size()) throw std::invalid_argument("label/probability count mismatch");
    if (labels.empty()) throw std::invalid_argument("no samples to report on");
    const std::size_t k = probs.front().size();
    EvalReport r;
    r.samples = labels.size();
    r.confusion.assign(k, std::vector<std::size_t>(k, 0));
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (probs[i].size() != k) throw std::invalid_argument("inconsistent class counts across samples");
        if (labels[i] >= k) throw std::invalid_argument("label out of range for " + std::to_string(k) + " classes");
        const std::size_t pred = argmax(probs[i]);
        ++r.confusion[labels[i]][pred];
        if (pred == labels[i]) ++correct;
        loss -= std::log(std::max(probs[i][labels[i]], 1e-300));
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
    r.loss = loss / static_cast<double>(r.samples);
    r.per_class.assign(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t total = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
        r.per_class[c] = total ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(total) : 0.0;
    }
    return r;
}

namespace {

std::vector<double> softmax(const std::vector<double>& z) {
    std::vector<double> p(z.size());
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) s += (p[j] = std::exp(z[j] - m));
    for (double& v : p) v /= s;
    return p;
}

}  // namespace

EvalReport evaluate(const LoadedDataset& data, ModelParams& params, Modality modality, std::vector<ScoreRow>* scores,
                    std::size_t batch_size) {
    check_labels(data, params.config.num_classes);
    std::vector<std::size_t> labels;
    std::vector<std::vector<double>> probs;
    const AugmentConfig no_augment{};
    for (std::size_t start = 0; start < data.samples.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, data.samples.size() - start);
        std::vector<SkeletonSequence> batch;
        for (std::size_t i = 0; i < count; ++i) {
            Rng unused(0);
            batch.push_back(
                prepare_sample(data.samples[start + i], params.config, modality, no_augment, SampleMode::eval, unused));
        }
        Tape tape;
        Bound bound(tape, params.set);
        Var logits = forward(bound, params, batch, ForwardOptions{});
        const Tensor& z = logits.value();
        for (std::size_t i = 0; i < count; ++i) {
            std::vector<double> row(z.data() + i * z.cols(), z.data() + (i + 1) * z.cols());
            labels.push_back(batch[i].label);
            probs.push_back(softmax(row));
            if (scores) scores->push_back({data.ids[start + i], batch[i].label, std::move(row)});
        }
    }
    return report_from_probabilities(labels, probs);
}

EvalReport evaluate(const DatasetManifest& manifest, ModelParams& params, Modality modality,
                    std::vector<ScoreRow>* scores) {
    return evaluate(load_dataset(manifest), params, modality, scores);
}

EvalReport fuse_streams(const std::vector<std::vector<ScoreRow>>& streams) {
    if (streams.empty()) throw std::invalid_argument("fuse: no score streams");
    const auto& first = streams.front();
    for (std::size_t s = 1; s < streams.size(); ++s) {
        const auto& other = streams[s];
        const std::size_t common = std::min(first.size(), other.size());
        for (std::size_t i = 0; i < common; ++i) {
            if (first[i].id != other[i].id) {
                throw std::invalid_argument("fuse: sample id mismatch at row " + std::to_string(i + 1) + ": '" +
                                            first[i].id + "' vs '" + other[i].id + "'");
            }
            if (first[i].label != other[i].label || first[i].logits.size() != other[i].logits.size()) {
                throw std::invalid_argument("fuse: label or class count mismatch for sample '" + first[i].id + "'");
            }
        }
        if (first.size() != other.size()) {
            throw std::invalid_argument("fuse: row count mismatch (" + std::to_string(first.size()) + " vs " +
                                        std::to_string(other.size()) + ")");
        }
    }
    std::vector<std::size_t> labels;
    std::vector<std::vector<double>> probs;
    for (std::size_t i = 0; i < first.size(); ++i) {
        std::vector<std::vector<double>> p;
        for (const auto& stream : streams) p.push_back(softmax(stream[i].logits));
        // Pairwise sum: n identical streams (n a power of two) average exactly.
        for (std::size_t width = 1; width < p.size(); width *= 2) {
            for (std::size_t s = 0; s + width < p.size(); s += 2 * width) {
                for (std::size_t j = 0; j < p[s].size(); ++j) p[s][j] += p[s + width][j];
            }
        }
        std::vector<double> avg = std::move(p.front());
        for (double& v : avg) v /= static_cast<double>(streams.size());
        labels.push_back(first[i].label);
        probs.push_back(std::move(avg));
    }
    return report_from_probabilities(labels, probs);
}

void save_scores(const std::filesystem::path& path, const std::vector<ScoreRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write score file " + path.string());
    const std::size_t k = rows.empty() ? 0 : rows.front().logits.size();
    os << "sample_id\tlabel";
    for (std::size_t j = 0; j < k; ++j) os << "\tlogit_" << j;
    os << '\n' << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.id << '\t' << r.label;
        for (double v : r.logits) os << '\t' << v;
        os << '\n';
    }
}

std::vector<ScoreRow> load_scores(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open score file " + path.string());
    std::string line;
    if (!std::getline(is, line) || line.rfind("sample_id\tlabel", 0) != 0) {
        throw FormatError(path.string() + ": missing score header");
    }
    const std::size_t k = static_cast<std::size_t>(std::count(line.begin(), line.end(), '\t')) - 1;
    std::vector<ScoreRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        ScoreRow r;
        std::vector<std::string> fields;
        while (std::getline(ss, field, '\t')) fields.push_back(field);
        if (fields.size() != k + 2) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(k + 2) +
                              " fields");
        }
        try {
            r.id = fields[0];
            r.label = std::stoul(fields[1]);
            for (std::size_t j = 0; j < k; ++j) r.logits.push_back(std::stod(fields[2 + j]));
        } catch (const std::logic_error&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace iip
