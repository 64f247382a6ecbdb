#pragma once

#include "iip/augment.hpp"
#include "iip/model.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace iip {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double lr = 0.01;  // full-scale schedule: 0.1
    double momentum = 0.9;
    double weight_decay = 0.0002;
    bool cosine = true;
    std::uint64_t seed = 0;
    Modality modality = Modality::joint;
    std::size_t workers = 1;
    AugmentConfig augment;

    void validate() const;
    /// Sets one `key = value` entry (augment keys are prefixed `augment.`).
    void set(const std::string& key, const std::string& value);
    /// Full-scale schedule: 300 epochs, batch 64, lr 0.1.
    static TrainConfig paper_schedule();
};

/// Momentum SGD with weight decay folded into the gradient:
/// v = momentum * v + grad + wd * param; param -= lr * v.
/// Buffers and ParamKind::no_decay tensors get no decay.
struct SgdState {
    std::vector<Tensor> velocity;
};

/// Throws NonFiniteError naming the offending parameter, before any update,
/// when a gradient is not finite.
void sgd_step(ParamSet& params, double lr, double momentum, double weight_decay, SgdState& state);

/// base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double acc = 0.0;

    /// `epoch=<n> lr=<f> loss=<f> acc=<f>`
    std::string format() const;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochRecord> log;
};

/// Sequences of a manifest, loaded once.
struct LoadedDataset {
    std::vector<SkeletonSequence> samples;
    std::vector<std::string> ids;
};

LoadedDataset load_dataset(const DatasetManifest& manifest);

/// Training-time view of one raw sample: raw augmentations, random crop
/// resampling and modality derivation. Eval mode skips augmentation and uses
/// the deterministic frame grid.
SkeletonSequence prepare_sample(const SkeletonSequence& raw, const ModelConfig& model, Modality modality,
                                const AugmentConfig& augment, SampleMode mode, Rng& rng);

/// Mean cross-entropy of one batch; its gradient is added to params.set.
double accumulate_gradients(ModelParams& params, std::span<const SkeletonSequence> batch,
                            const ForwardOptions& options);

TrainResult train(const LoadedDataset& data, const ModelConfig& model, const TrainConfig& config,
                  std::ostream* log = nullptr);
TrainResult train(const DatasetManifest& manifest, const ModelConfig& model, const TrainConfig& config,
                  std::ostream* log = nullptr);

struct EvalReport {
    std::size_t samples = 0;
    double accuracy = 0.0;
    double loss = 0.0;
    std::vector<double> per_class;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

    void print(std::ostream& os) const;
};

struct ScoreRow {
    std::string id;
    std::size_t label = 0;
    std::vector<double> logits;
};

EvalReport evaluate(const LoadedDataset& data, ModelParams& params, Modality modality,
                    std::vector<ScoreRow>* scores = nullptr, std::size_t batch_size = 32);
EvalReport evaluate(const DatasetManifest& manifest, ModelParams& params, Modality modality,
                    std::vector<ScoreRow>* scores = nullptr);

/// Accuracy, confusion and cross-entropy from per-sample class
/// probabilities.
EvalReport report_from_probabilities(const std::vector<std::size_t>& labels,
                                     const std::vector<std::vector<double>>& probs);

/// Softmax of each stream's logits, averaged per sample, then argmax.
/// Throws std::invalid_argument naming the first mismatching sample id.
EvalReport fuse_streams(const std::vector<std::vector<ScoreRow>>& streams);

/// Tab-separated: header `sample_id label logit_0 ... logit_{K-1}`, then one
/// row per sample in evaluation order.
void save_scores(const std::filesystem::path& path, const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> load_scores(const std::filesystem::path& path);

}  // namespace iip
