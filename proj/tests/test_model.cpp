#include "iip/model.hpp"
#include "iip/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace iip;
using testutil::tiny_config;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("iip_model_" + tag + "_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
}

std::vector<SkeletonSequence> batch_of(std::size_t n, std::size_t frames, std::uint64_t seed) {
    Rng rng = derive_stream(seed, 0);
    std::vector<SkeletonSequence> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample(i % 4, frames, rng));
    return out;
}

Tensor logits_of(ModelParams& mp, std::span<const SkeletonSequence> batch, std::vector<Var>* layers = nullptr) {
    Tape tape;
    Bound bound(tape, mp.set);
    ForwardOptions opt;
    opt.layer_outputs = layers;
    return forward(bound, mp, batch, opt).value();
}

std::vector<Tensor> grads(const ParamSet& set) {
    std::vector<Tensor> g;
    for (const Parameter& p : set) g.push_back(p.grad);
    return g;
}

}  // namespace

TEST(Model, OutputShapeAndTokenCount) {
    for (LayerStyle style : {LayerStyle::split, LayerStyle::flat}) {
        ModelConfig c = tiny_config();
        c.layers = 2;
        c.style = style;
        ModelParams mp = init_params(c, 1);
        const auto batch = batch_of(3, c.frames, 2);
        Tape tape;
        Bound bound(tape, mp.set);
        std::vector<Var> layers;
        ForwardOptions opt;
        opt.layer_outputs = &layers;
        Var y = forward(bound, mp, batch, opt);
        EXPECT_EQ(y.shape(), (Shape{3, c.num_classes}));
        ASSERT_EQ(layers.size(), c.layers + 1);
        const std::size_t rows = 3 * (c.grid(1).tokens_per_sample() + 1);
        for (Var v : layers) EXPECT_EQ(v.shape(), (Shape{rows, c.embed_channels}));
    }
}

TEST(Model, FrameCountMismatchThrows) {
    ModelConfig c = tiny_config();
    ModelParams mp = init_params(c, 1);
    const auto batch = batch_of(1, c.frames + 1, 2);
    EXPECT_THROW(logits_of(mp, batch), ShapeError);
}

TEST(Init, SameSeedSameParams) {
    const ModelConfig c = tiny_config();
    const ModelParams a = init_params(c, 5);
    const ModelParams b = init_params(c, 5);
    const ModelParams d = init_params(c, 6);
    ASSERT_EQ(a.set.size(), b.set.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.set.size(); ++i) {
        EXPECT_EQ(a.set[i].value, b.set[i].value) << a.set[i].name;
        differs = differs || !(a.set[i].value == d.set[i].value);
    }
    EXPECT_TRUE(differs);
}

TEST(Init, BiasesZeroAndWeightsBounded) {
    const ModelConfig c = tiny_config();
    const ModelParams mp = init_params(c, 3);
    std::size_t biases = 0;
    for (const Parameter& p : mp.set) {
        if (p.name.ends_with(".bias")) {
            ++biases;
            for (double v : p.value.values()) EXPECT_EQ(v, 0.0) << p.name;
        }
        if (p.name.ends_with(".weight") && p.value.rank() == 2) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.dim(0)));
            for (double v : p.value.values()) EXPECT_LE(std::abs(v), bound) << p.name;
        }
    }
    EXPECT_GT(biases, 0u);
}

TEST(Init, ZeroInputGivesFiniteLogits) {
    const ModelConfig c = tiny_config();
    ModelParams mp = init_params(c, 3);
    std::vector<SkeletonSequence> batch{SkeletonSequence(c.frames, kNtuJoints, 1)};
    const Tensor y = logits_of(mp, batch);
    for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    ModelConfig c = tiny_config();
    c.attention = AttentionMode::standard;
    c.dropout = 0.25;
    const ModelParams mp = init_params(c, 9);
    const fs::path dir = temp_dir("ckpt");
    save_checkpoint(dir / "m.ckpt", mp, {{"modality", "bone"}, {"seed", "9"}});
    const Checkpoint ck = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(ck.params.config, c);
    EXPECT_EQ(ck.metadata.at("modality"), "bone");
    EXPECT_EQ(ck.metadata.at("seed"), "9");
    ASSERT_EQ(ck.params.set.size(), mp.set.size());
    for (std::size_t i = 0; i < mp.set.size(); ++i) {
        EXPECT_EQ(ck.params.set[i].name, mp.set[i].name);
        EXPECT_EQ(ck.params.set[i].value, mp.set[i].value);
    }
    // Saving the loaded model reproduces the file byte for byte.
    save_checkpoint(dir / "m2.ckpt", ck.params, ck.metadata);
    auto bytes = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    EXPECT_EQ(bytes(dir / "m.ckpt"), bytes(dir / "m2.ckpt"));
    fs::remove_all(dir);
}

TEST(Checkpoint, CorruptFilesRejected) {
    const ModelParams mp = init_params(tiny_config(), 1);
    const fs::path dir = temp_dir("bad");
    save_checkpoint(dir / "m.ckpt", mp);
    std::ifstream is(dir / "m.ckpt", std::ios::binary);
    const std::string bytes(std::istreambuf_iterator<char>(is), {});
    auto write = [&](const std::string& name, const std::string& data) {
        std::ofstream(dir / name, std::ios::binary) << data;
        return dir / name;
    };
    EXPECT_THROW(load_checkpoint(write("magic", "XXXX" + bytes.substr(4))), FormatError);
    EXPECT_THROW(load_checkpoint(write("short", bytes.substr(0, bytes.size() - 3))), FormatError);
    EXPECT_THROW(load_checkpoint(write("long", bytes + "x")), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
    fs::remove_all(dir);
}

TEST(Checkpoint, ShapeMismatchAgainstConfigRejected) {
    // A checkpoint whose config says 32 channels but whose tensors have 16.
    ModelParams mp = init_params(tiny_config(), 1);
    const fs::path dir = temp_dir("shape");
    save_checkpoint(dir / "m.ckpt", mp);
    std::ifstream is(dir / "m.ckpt", std::ios::binary);
    std::string bytes(std::istreambuf_iterator<char>(is), {});
    const std::string from = "embed_channels=16", to = "embed_channels=32";
    const auto at = bytes.find(from);
    ASSERT_NE(at, std::string::npos);
    bytes.replace(at, from.size(), to);
    // Keep the header length field consistent.
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 4);
    len += static_cast<std::uint32_t>(to.size() - from.size());
    std::memcpy(bytes.data() + 8, &len, 4);
    std::ofstream(dir / "m.ckpt", std::ios::binary) << bytes;
    EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), FormatError);
    fs::remove_all(dir);
}

TEST(Config, BaselineDiffersOnlyInTwoSwitches) {
    const ModelConfig base = tiny_config();
    ModelConfig ablated = base;
    ablated.set("attention", "standard");
    ablated.set("head", "avg_pool");
    const auto a = base.to_map();
    const auto b = ablated.to_map();
    std::set<std::string> changed;
    for (const auto& [k, v] : a)
        if (b.at(k) != v) changed.insert(k);
    EXPECT_EQ(changed, (std::set<std::string>{"attention", "head"}));

    // The parameter sets differ only by the intra projections.
    const ModelParams pa = init_params(base, 1);
    const ModelParams pb = init_params(ablated, 1);
    std::vector<std::string> na, nb;
    for (const Parameter& p : pa.set)
        if (p.name.find(".intra.") == std::string::npos) na.push_back(p.name);
    for (const Parameter& p : pb.set) nb.push_back(p.name);
    EXPECT_EQ(na, nb);
    EXPECT_LT(pb.set.size(), pa.set.size());
}

TEST(Config, UnknownKeyAndBadValuesRejected) {
    ModelConfig c;
    EXPECT_THROW(c.set("layerz", "2"), ConfigError);
    EXPECT_THROW(c.set("layers", "two"), ConfigError);
    EXPECT_THROW(c.set("head", "max"), ConfigError);
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(ModelConfig::from_map(tiny_config().to_map()), tiny_config());
}

TEST(Model, AvgPoolHeadUsesTokenMean) {
    // With avg_pool the logits do not depend on the class token.
    ModelConfig c = tiny_config();
    c.head = HeadMode::avg_pool;
    c.layers = 1;
    ModelParams mp = init_params(c, 4);
    const auto batch = batch_of(2, c.frames, 5);
    std::vector<Var> layers;
    Tape tape;
    Bound bound(tape, mp.set);
    ForwardOptions opt;
    opt.layer_outputs = &layers;
    const Tensor y = forward(bound, mp, batch, opt).value();
    const Tensor last = layers.back().value();
    const std::size_t n = c.grid(1).tokens_per_sample() + 1;
    const Tensor& w = mp.set[mp.head.weight].value;
    const Tensor& b = mp.set[mp.head.bias].value;
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t k = 0; k < c.num_classes; ++k) {
            double acc = b[k];
            for (std::size_t j = 0; j < c.embed_channels; ++j) {
                double mean = 0.0;
                for (std::size_t r = 1; r < n; ++r) mean += last.at(s * n + r, j);
                acc += mean / static_cast<double>(n - 1) * w.at(j, k);
            }
            EXPECT_NEAR(y.at(s, k), acc, 1e-9);
        }
}

TEST(Model, LossDecreasesOverTwentySteps) {
    // Fixed batch of centered training inputs, train-mode forward, default
    // optimizer settings.
    ModelConfig c = tiny_config();
    ModelParams mp = init_params(c, 11);
    Rng rng = derive_stream(12, 0);
    const TrainConfig tc;
    AugmentConfig none;
    none.rotation = false;
    none.part_mask = false;
    std::vector<SkeletonSequence> batch;
    for (std::size_t i = 0; i < 8; ++i)
        batch.push_back(prepare_sample(synth_sample(i % 4, 48, rng), c, Modality::joint, none, SampleMode::eval, rng));
    SgdState state;
    ForwardOptions opt;
    opt.training = true;
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 20; ++step) {
        mp.set.zero_grad();
        const double loss = accumulate_gradients(mp, batch, opt);
        EXPECT_LT(loss, prev) << "step " << step;
        prev = loss;
        sgd_step(mp.set, 0.01, tc.momentum, tc.weight_decay, state);
    }
}

TEST(Model, FramePermutationInvariantWithoutPositions) {
    ModelConfig c = tiny_config();
    c.positional = false;
    c.layers = 2;
    c.frames = 5;
    ModelParams mp = init_params(c, 13);
    // Nonzero running statistics and biases so nothing is trivially symmetric.
    std::mt19937_64 r(14);
    for (Parameter& p : mp.set)
        if (p.name.ends_with(".bias") || p.name.ends_with("running_mean"))
            p.value = testutil::random_tensor(p.value.shape(), r, -0.1, 0.1);
    const auto batch = batch_of(2, c.frames, 15);
    const std::size_t perm[] = {3, 0, 4, 2, 1};
    std::vector<SkeletonSequence> permuted = batch;
    for (std::size_t s = 0; s < batch.size(); ++s)
        for (std::size_t ch = 0; ch < kCoordChannels; ++ch)
            for (std::size_t f = 0; f < c.frames; ++f)
                for (std::size_t v = 0; v < kNtuJoints; ++v)
                    permuted[s].at(ch, f, v, 0) = batch[s].at(ch, perm[f], v, 0);
    const Tensor y = logits_of(mp, batch);
    const Tensor yp = logits_of(mp, permuted);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(yp[i], y[i], 1e-12);

    // With positional embeddings the permutation is visible.
    c.positional = true;
    ModelParams mq = init_params(c, 13);
    const Tensor z = logits_of(mq, batch);
    const Tensor zp = logits_of(mq, permuted);
    double diff = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) diff = std::max(diff, std::abs(z[i] - zp[i]));
    EXPECT_GT(diff, 1e-9);
}

TEST(Model, BatchGradientIsMeanOfSampleGradients) {
    ModelConfig c = tiny_config();
    ModelParams mp = init_params(c, 21);
    const auto batch = batch_of(4, c.frames, 22);
    ForwardOptions opt;
    mp.set.zero_grad();
    accumulate_gradients(mp, batch, opt);
    const std::vector<Tensor> whole = grads(mp.set);
    std::vector<Tensor> sum;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        mp.set.zero_grad();
        accumulate_gradients(mp, std::span(batch).subspan(s, 1), opt);
        const auto g = grads(mp.set);
        if (sum.empty()) sum = g;
        else
            for (std::size_t i = 0; i < g.size(); ++i)
                for (std::size_t j = 0; j < g[i].size(); ++j) sum[i][j] += g[i][j];
    }
    for (std::size_t i = 0; i < whole.size(); ++i)
        for (std::size_t j = 0; j < whole[i].size(); ++j)
            EXPECT_NEAR(whole[i][j], sum[i][j] / 4.0, 1e-10) << mp.set[i].name;
}
