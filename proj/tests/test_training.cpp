#include "iip/config_file.hpp"
#include "iip/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

using namespace iip;
using testutil::tiny_config;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("iip_train_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ParamSet scalar_set(double w, ParamKind kind = ParamKind::weight) {
    ParamSet s;
    s.add("w", Tensor({1}, w), kind);
    s.zero_grad();
    return s;
}

TrainConfig quick_train(std::size_t epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 4;
    t.seed = 3;
    return t;
}

std::vector<ScoreRow> random_scores(std::size_t n, std::size_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 2.0);
    std::vector<ScoreRow> rows;
    for (std::size_t i = 0; i < n; ++i) {
        ScoreRow r{"s" + std::to_string(i), i % k, {}};
        for (std::size_t j = 0; j < k; ++j) r.logits.push_back(g(rng));
        rows.push_back(std::move(r));
    }
    return rows;
}


}  // namespace

TEST(Sgd, ZeroLearningRateKeepsParams) {
    ParamSet s = scalar_set(2.0);
    s[0].grad[0] = 5.0;
    SgdState st;
    sgd_step(s, 0.0, 0.9, 0.1, st);
    EXPECT_EQ(s[0].value[0], 2.0);
}

TEST(Sgd, PlainGradientDescent) {
    ParamSet s = scalar_set(2.0);
    s[0].grad[0] = 5.0;
    SgdState st;
    sgd_step(s, 0.1, 0.0, 0.0, st);
    EXPECT_DOUBLE_EQ(s[0].value[0], 1.5);
}

TEST(Sgd, MomentumAndDecayFollowUpdateRule) {
    ParamSet s = scalar_set(1.0);
    SgdState st;
    double v = 0.0, w = 1.0;
    for (int i = 0; i < 5; ++i) {
        s[0].grad[0] = 0.3;
        sgd_step(s, 0.05, 0.9, 0.01, st);
        v = 0.9 * v + 0.3 + 0.01 * w;
        w -= 0.05 * v;
        EXPECT_DOUBLE_EQ(s[0].value[0], w);
    }
}

TEST(Sgd, QuadraticBowlConverges) {
    // f(w) = w^2 / 2 from w = 1 at lr 0.1, momentum 0.9. The iteration matrix
    // has spectral radius sqrt(0.9), so |w| first drops below 1e-6 at step
    // 210 and stays below from step 257 on.
    ParamSet s = scalar_set(1.0);
    SgdState st;
    std::size_t first = 0, last_above = 0;
    for (std::size_t step = 1; step <= 400; ++step) {
        s[0].grad[0] = s[0].value[0];
        sgd_step(s, 0.1, 0.9, 0.0, st);
        const bool below = std::abs(s[0].value[0]) < 1e-6;
        if (below && first == 0) first = step;
        if (!below) last_above = step;
    }
    EXPECT_EQ(first, 210u);
    EXPECT_EQ(last_above, 256u);
    EXPECT_LT(std::abs(s[0].value[0]), 1e-8);
}

TEST(Sgd, DecayExcludesClassTokenPositionsAndBuffers) {
    ModelParams a = init_params(tiny_config(), 1);
    ModelParams b = init_params(tiny_config(), 1);
    a.set.zero_grad();
    b.set.zero_grad();
    SgdState sa, sb;
    sgd_step(a.set, 0.1, 0.9, 0.0, sa);
    sgd_step(b.set, 0.1, 0.9, 0.5, sb);
    for (std::size_t i = 0; i < a.set.size(); ++i) {
        const Parameter& p = b.set[i];
        const bool excluded = p.name == "cls_token" || p.name.starts_with("pos_") || p.kind == ParamKind::buffer;
        if (excluded) {
            EXPECT_EQ(p.value, a.set[i].value) << p.name;
        } else if (p.name.ends_with(".weight")) {
            EXPECT_FALSE(p.value == a.set[i].value) << p.name;
        }
    }
    EXPECT_EQ(b.set[*b.set.find("cls_token")].kind, ParamKind::no_decay);
}

TEST(Sgd, NonFiniteGradientAbortsBeforeUpdate) {
    ParamSet s;
    s.add("a", Tensor({2}, 1.0));
    s.add("b", Tensor({2}, 1.0));
    s.zero_grad();
    s[0].grad[0] = 1.0;
    s[1].grad[1] = std::numeric_limits<double>::quiet_NaN();
    SgdState st;
    try {
        sgd_step(s, 0.1, 0.0, 0.0, st);
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
    }
    EXPECT_EQ(s[0].value[0], 1.0);
}

TEST(CosineLr, Endpoints) {
    EXPECT_EQ(cosine_lr(0, 100, 0.1), 0.1);
    EXPECT_NEAR(cosine_lr(100, 100, 0.1), 0.0, 1e-18);
    EXPECT_NEAR(cosine_lr(50, 100, 0.1), 0.05, 1e-17);
    EXPECT_NEAR(cosine_lr(25, 100, 1.0), (1 + std::cos(std::numbers::pi / 4)) / 2, 1e-15);
}

TEST(TrainConfig, KeysAndValidation) {
    TrainConfig t;
    t.set("epochs", "7");
    t.set("augment.part_mask_prob", "0.25");
    t.set("modality", "bone_motion");
    EXPECT_EQ(t.epochs, 7u);
    EXPECT_EQ(t.augment.part_mask_prob, 0.25);
    EXPECT_EQ(t.modality, Modality::bone_motion);
    EXPECT_THROW(t.set("epoch", "1"), ConfigError);
    EXPECT_THROW(t.set("lr", "fast"), ConfigError);
    t.lr = 0.0;
    EXPECT_THROW(t.validate(), ConfigError);
    const TrainConfig p = TrainConfig::paper_schedule();
    EXPECT_EQ(p.epochs, 300u);
    EXPECT_EQ(p.batch_size, 64u);
    EXPECT_EQ(p.lr, 0.1);
    EXPECT_EQ(p.momentum, 0.9);
    EXPECT_EQ(p.weight_decay, 0.0002);
}

TEST(ConfigFile, ParsesCommentsAndWhitespace) {
    const auto kv = parse_key_values("# header\n layers = 2\n\nheads=4   # trailing\n");
    EXPECT_EQ(kv.size(), 2u);
    EXPECT_EQ(kv.at("layers"), "2");
    EXPECT_EQ(kv.at("heads"), "4");
    EXPECT_THROW(parse_key_values("layers = 2\nlayers = 3\n"), ConfigError);
    EXPECT_THROW(parse_key_values("just words\n"), ConfigError);
    EXPECT_THROW(parse_key_values(" = 3\n"), ConfigError);
}

class TrainLoop : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new fs::path(temp_dir("loop"));
        manifest_ = new DatasetManifest(synth_dataset(4, 2, 40, 1, *dir_ / "data"));
    }
    static void TearDownTestSuite() {
        fs::remove_all(*dir_);
        delete manifest_;
        delete dir_;
    }
    static fs::path* dir_;
    static DatasetManifest* manifest_;
};
fs::path* TrainLoop::dir_ = nullptr;
DatasetManifest* TrainLoop::manifest_ = nullptr;

TEST_F(TrainLoop, OneEpochWritesLoadableCheckpoint) {
    std::ostringstream log;
    const TrainResult r = train(*manifest_, tiny_config(), quick_train(1), &log);
    ASSERT_EQ(r.log.size(), 1u);
    EXPECT_EQ(log.str(), r.log[0].format() + "\n");
    EXPECT_EQ(log.str().rfind("epoch=1 lr=0.01 loss=", 0), 0u);
    save_checkpoint(*dir_ / "one.ckpt", r.params);
    const Checkpoint ck = load_checkpoint(*dir_ / "one.ckpt");
    for (std::size_t i = 0; i < r.params.set.size(); ++i) EXPECT_EQ(ck.params.set[i].value, r.params.set[i].value);
}

TEST_F(TrainLoop, SameSeedIsBitIdenticalAcrossWorkerCounts) {
    TrainConfig t = quick_train(2);
    std::ostringstream la, lb, lc;
    const TrainResult a = train(*manifest_, tiny_config(), t, &la);
    const TrainResult b = train(*manifest_, tiny_config(), t, &lb);
    t.workers = 3;
    const TrainResult c = train(*manifest_, tiny_config(), t, &lc);
    EXPECT_EQ(la.str(), lb.str());
    EXPECT_EQ(la.str(), lc.str());
    for (std::size_t i = 0; i < a.params.set.size(); ++i) {
        EXPECT_EQ(a.params.set[i].value, b.params.set[i].value) << a.params.set[i].name;
        EXPECT_EQ(a.params.set[i].value, c.params.set[i].value) << a.params.set[i].name;
    }
    t.workers = 1;
    t.seed = 4;
    const TrainResult d = train(*manifest_, tiny_config(), t);
    bool differs = false;
    for (std::size_t i = 0; i < a.params.set.size(); ++i) differs = differs || !(a.params.set[i].value == d.params.set[i].value);
    EXPECT_TRUE(differs);
}

TEST_F(TrainLoop, BadLabelsAndEmptyManifestRejected) {
    ModelConfig c = tiny_config();
    c.num_classes = 3;
    EXPECT_THROW(train(*manifest_, c, quick_train(1)), std::invalid_argument);
    EXPECT_THROW(train(DatasetManifest{}, tiny_config(), quick_train(1)), std::invalid_argument);
}

TEST_F(TrainLoop, EvaluateIsDeterministicAndConsistent) {
    ModelParams mp = init_params(tiny_config(), 2);
    std::vector<ScoreRow> s1, s2;
    const EvalReport r1 = evaluate(*manifest_, mp, Modality::joint, &s1);
    const EvalReport r2 = evaluate(*manifest_, mp, Modality::joint, &s2);
    EXPECT_EQ(r1.accuracy, r2.accuracy);
    EXPECT_EQ(r1.loss, r2.loss);
    ASSERT_EQ(s1.size(), manifest_->entries.size());
    std::size_t trace = 0, total = 0;
    for (std::size_t i = 0; i < r1.confusion.size(); ++i) {
        std::size_t row = 0;
        for (std::size_t n : r1.confusion[i]) row += n;
        EXPECT_EQ(row, 2u);  // two samples per class
        trace += r1.confusion[i][i];
        total += row;
    }
    EXPECT_DOUBLE_EQ(static_cast<double>(trace) / static_cast<double>(total), r1.accuracy);
    for (std::size_t i = 0; i < s1.size(); ++i) {
        EXPECT_EQ(s1[i].id, s2[i].id);
        EXPECT_EQ(s1[i].logits, s2[i].logits);
        EXPECT_EQ(s1[i].label, manifest_->entries[i].label);
    }
}

TEST(Report, UniformProbabilitiesGiveChance) {
    std::vector<std::size_t> labels;
    std::vector<std::vector<double>> probs;
    for (std::size_t i = 0; i < 400; ++i) {
        labels.push_back(i % 4);
        probs.push_back({0.25, 0.25, 0.25, 0.25});
    }
    const EvalReport r = report_from_probabilities(labels, probs);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.25);
    EXPECT_NEAR(r.loss, std::log(4.0), 1e-13);
    EXPECT_EQ(r.per_class, (std::vector<double>{1.0, 0.0, 0.0, 0.0}));
}

TEST(Fusion, SelfFusionIsIdempotent) {
    const auto s = random_scores(50, 5, 1);
    const EvalReport one = fuse_streams({s});
    const EvalReport two = fuse_streams({s, s});
    const EvalReport four = fuse_streams({s, s, s, s});
    EXPECT_EQ(one.accuracy, two.accuracy);
    EXPECT_EQ(one.loss, four.loss);
    EXPECT_EQ(one.confusion, four.confusion);
    EXPECT_EQ(one.per_class, four.per_class);
}

TEST(Fusion, UniformStreamKeepsArgmax) {
    const auto s = random_scores(200, 6, 2);
    auto u = s;
    for (auto& r : u) std::fill(r.logits.begin(), r.logits.end(), 0.0);
    const EvalReport single = fuse_streams({s});
    const EvalReport mixed = fuse_streams({s, u});
    EXPECT_EQ(single.accuracy, mixed.accuracy);
    EXPECT_EQ(single.confusion, mixed.confusion);
    // All-uniform fusion predicts class 0 everywhere: chance on balanced labels.
    const EvalReport flat = fuse_streams({u, u});
    EXPECT_NEAR(flat.accuracy, 1.0 / 6.0, 0.01);
}

TEST(Fusion, AveragesSoftmaxNotLogits) {
    // Softmax averaging and logit averaging pick different classes here.
    std::vector<ScoreRow> a{{"x", 0, {10.0, 0.0, 9.0}}};
    std::vector<ScoreRow> b{{"x", 0, {0.0, 1.0, 0.0}}};
    const EvalReport r = fuse_streams({a, b});
    const double e = std::exp(1.0);
    const double pa0 = 1.0 / (1.0 + std::exp(-10.0) + std::exp(-1.0));
    const double pb1 = e / (e + 2.0);
    EXPECT_GT(0.5 * (pa0 + 1.0 / (e + 2.0)), 0.5 * (std::exp(-10.0) * pa0 + pb1));
    EXPECT_EQ(r.accuracy, 1.0);
    const double avg_logit_0 = 5.0, avg_logit_2 = 4.5;
    EXPECT_GT(avg_logit_0, avg_logit_2);
}

TEST(Fusion, MismatchesNamed) {
    const auto s = random_scores(5, 3, 3);
    auto t = s;
    t[2].id = "other";
    try {
        fuse_streams({s, t});
        FAIL() << "expected mismatch";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("s2"), std::string::npos) << e.what();
    }
    auto shorter = s;
    shorter.pop_back();
    EXPECT_THROW(fuse_streams({s, shorter}), std::invalid_argument);
    EXPECT_THROW(fuse_streams({}), std::invalid_argument);
}

TEST(ScoreFile, RoundTripIsBitExact) {
    const fs::path dir = temp_dir("scores");
    auto rows = random_scores(20, 4, 4);
    rows[0].logits[0] = 1.0 / 3.0;
    rows[1].logits[1] = -1e-300;
    save_scores(dir / "s.tsv", rows);
    const auto back = load_scores(dir / "s.tsv");
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].id, rows[i].id);
        EXPECT_EQ(back[i].label, rows[i].label);
        EXPECT_EQ(back[i].logits, rows[i].logits);
    }
    std::ifstream is(dir / "s.tsv");
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "sample_id\tlabel\tlogit_0\tlogit_1\tlogit_2\tlogit_3");
    std::ofstream(dir / "bad.tsv") << "nope\n";
    EXPECT_THROW(load_scores(dir / "bad.tsv"), FormatError);
    EXPECT_THROW(load_scores(dir / "missing.tsv"), std::runtime_error);
    fs::remove_all(dir);
}
