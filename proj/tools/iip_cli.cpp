#include "iip/augment.hpp"
#include "iip/complexity.hpp"
#include "iip/config_file.hpp"
#include "iip/gradcheck.hpp"
#include "iip/training.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>

using namespace iip;

namespace {

constexpr int kUserError = 1;
constexpr int kInternalError = 2;

bool is_train_key(const std::string& key) {
    static const char* const keys[] = {"epochs", "batch_size", "lr",      "momentum", "weight_decay",
                                       "cosine", "seed",       "workers", "modality"};
    if (key.rfind("augment.", 0) == 0) return true;
    return std::find(std::begin(keys), std::end(keys), key) != std::end(keys);
}

struct FileConfig {
    ModelConfig model;
    TrainConfig train;
};

// One file holds both model and training keys.
FileConfig load_config(const std::string& path) {
    FileConfig cfg;
    if (path.empty()) return cfg;
    for (const auto& [key, value] : load_key_values(path)) {
        if (is_train_key(key))
            cfg.train.set(key, value);
        else
            cfg.model.set(key, value);
    }
    return cfg;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t classes = 4;
    std::size_t per_class = 32;
    std::size_t frames = 48;
    std::uint64_t seed = 0;
    std::string out;
};

int run_synth(const SynthArgs& a) {
    if (a.classes == 0 || a.per_class == 0 || a.frames == 0)
        throw std::invalid_argument("synth: --classes, --per-class and --frames must be >= 1");
    const auto manifest = synth_dataset(a.classes, a.per_class, a.frames, a.seed, a.out);
    std::cout << "wrote " << manifest.entries.size() << " samples to " << a.out << "/manifest.tsv\n";
    return 0;
}

struct TrainArgs {
    std::string manifest;
    std::string modality;
    std::string config;
    std::string out;
    std::string log;
    std::optional<std::size_t> epochs, batch, workers;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> num_classes;
};

int run_train(const TrainArgs& a) {
    FileConfig cfg = load_config(a.config);
    if (!a.modality.empty()) cfg.train.modality = parse_modality(a.modality);
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch) cfg.train.batch_size = *a.batch;
    if (a.workers) cfg.train.workers = *a.workers;
    if (a.lr) cfg.train.lr = *a.lr;
    if (a.seed) cfg.train.seed = *a.seed;

    const DatasetManifest manifest = load_manifest(a.manifest);
    if (a.num_classes)
        cfg.model.num_classes = *a.num_classes;
    else if (a.config.empty() || !load_key_values(a.config).contains("num_classes"))
        cfg.model.num_classes = manifest.num_classes();

    const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write metrics log " + log_path);

    struct Tee : std::streambuf {
        std::streambuf *a, *b;
        int overflow(int c) override {
            if (c == EOF) return 0;
            a->sputc(static_cast<char>(c));
            b->sputc(static_cast<char>(c));
            return c;
        }
        int sync() override { return a->pubsync() | b->pubsync(); }
    } tee;
    tee.a = log.rdbuf();
    tee.b = std::cout.rdbuf();
    std::ostream both(&tee);

    TrainResult r = train(manifest, cfg.model, cfg.train, &both);
    save_checkpoint(a.out, r.params,
                    {{"modality", std::string(to_string(cfg.train.modality))},
                     {"seed", std::to_string(cfg.train.seed)},
                     {"epochs", std::to_string(cfg.train.epochs)}});
    std::cout << "checkpoint " << a.out << "\nmetrics " << log_path << '\n';
    return 0;
}

struct EvalArgs {
    std::string manifest;
    std::string ckpt;
    std::string scores;
    std::string modality;
};

int run_eval(const EvalArgs& a) {
    Checkpoint ck = load_checkpoint(a.ckpt);
    Modality modality = Modality::joint;
    if (!a.modality.empty())
        modality = parse_modality(a.modality);
    else if (auto it = ck.metadata.find("modality"); it != ck.metadata.end())
        modality = parse_modality(it->second);
    std::vector<ScoreRow> rows;
    const EvalReport report = evaluate(load_manifest(a.manifest), ck.params, modality, &rows);
    report.print(std::cout);
    if (!a.scores.empty()) save_scores(a.scores, rows);
    return 0;
}

int run_fuse(const std::vector<std::string>& files) {
    std::vector<std::vector<ScoreRow>> streams;
    for (const auto& f : files) streams.push_back(load_scores(f));
    fuse_streams(streams).print(std::cout);
    return 0;
}

struct FlopsArgs {
    std::string config;
    std::string compare;
    bool csv = false;
};

int run_flops(const FlopsArgs& a) {
    const CostReport base = count_model(load_config(a.config).model);
    if (a.compare.empty()) {
        if (a.csv)
            print_report_csv(std::cout, base);
        else
            print_report(std::cout, base);
        return 0;
    }
    const CostReport other = count_model(load_config(a.compare).model);
    if (a.csv) {
        print_report_csv(std::cout, base);
        print_report_csv(std::cout, other);
    } else {
        std::cout << "== " << a.config << '\n';
        print_report(std::cout, base);
        std::cout << "== " << a.compare << '\n';
        print_report(std::cout, other);
    }
    std::cout << "== ratio (" << a.compare << " / " << a.config << ")\n";
    print_comparison(std::cout, compare_configs(base, other));
    return 0;
}

struct AugmentArgs {
    std::string in;
    std::string out;
    std::string op;
    std::uint64_t seed = 0;
    double angle_bound = std::numbers::pi / 10.0;
    long part = -1;
    double sigma = 0.01;
    std::size_t count = 10;
};

SkeletonSequence mask_part(const SkeletonSequence& seq, std::size_t part) {
    const PartitionMap map = seq.joints() == kNtuJoints ? PartitionMap::ntu25_parts()
                                                        : PartitionMap::identity(seq.joints());
    if (part >= map.part_count())
        throw std::invalid_argument("augment: part " + std::to_string(part) + " out of range for " +
                                    std::to_string(map.part_count()) + " parts");
    SkeletonSequence out = seq;
    const std::size_t c = seq.coords.dim(0), f = seq.frames(), v = seq.joints();
    for (std::size_t b = 0; b < seq.persons(); ++b) {
        Tensor slab({c, f, v});
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t t = 0; t < f; ++t)
                for (std::size_t j = 0; j < v; ++j) slab[(i * f + t) * v + j] = seq.at(i, t, j, b);
        slab = part_mask(slab, map, part);
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t t = 0; t < f; ++t)
                for (std::size_t j = 0; j < v; ++j) out.at(i, t, j, b) = slab[(i * f + t) * v + j];
    }
    return out;
}

int run_augment(const AugmentArgs& a) {
    const SkeletonSequence seq = load_sequence(a.in);
    Rng rng = derive_stream(a.seed, 0);
    SkeletonSequence out;
    if (a.op == "rotation") {
        const Eigen::Matrix3d r = random_rotation(a.angle_bound, rng);
        out = apply_rotation(seq, r);
        std::cout << "rotation\n" << r << '\n';
    } else if (a.op == "part_mask") {
        const std::size_t parts = seq.joints() == kNtuJoints ? PartitionMap::ntu25_parts().part_count() : seq.joints();
        const std::size_t part =
            a.part >= 0 ? static_cast<std::size_t>(a.part) : std::uniform_int_distribution<std::size_t>(0, parts - 1)(rng);
        out = mask_part(seq, part);
        std::cout << "masked part " << part << '\n';
    } else if (a.op == "noise") {
        out = gaussian_noise(seq, a.sigma, rng);
    } else {
        out = joint_mask(seq, a.count, rng);
    }
    save_sequence(out, a.out);
    std::cout << "wrote " << a.out << '\n';
    return 0;
}

int run_gradcheck(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    for (const auto& r : run_gradcheck_suite(seed)) {
        const bool pass = r.max_rel_error < 1e-4;
        ok = ok && pass;
        std::cout << std::left << std::setw(24) << r.name << " max_rel_err=" << std::scientific << std::setprecision(3)
                  << r.max_rel_error << std::defaultfloat << " checked=" << r.checked << (pass ? "  ok" : "  FAIL")
                  << '\n';
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (ok ? "all gradients agree" : "gradient mismatch") << '\n';
    // Timing goes to stderr so stdout is identical across runs.
    std::cerr << "gradcheck took " << std::fixed << std::setprecision(2) << secs << " s\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"IIP-Transformer skeleton action recognition"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    const auto modality_check = CLI::IsMember({"joint", "bone", "joint_motion", "bone_motion"});

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Write a synthetic dataset and its manifest");
    s->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
    s->add_option("--per-class", synth.per_class, "Samples per class")->capture_default_str();
    s->add_option("--frames", synth.frames, "Frames per sample")->capture_default_str();
    s->add_option("--seed", synth.seed, "Noise seed")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model on a manifest");
    t->add_option("--manifest", tr.manifest, "Dataset manifest (TSV)")->required()->check(CLI::ExistingFile);
    t->add_option("--modality", tr.modality, "Input stream (default: joint, or the config file value)")
        ->check(modality_check);
    t->add_option("--config", tr.config, "key = value file with model and training keys")->check(CLI::ExistingFile);
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--log", tr.log, "Metrics log path (default: <out>.log)");
    t->add_option("--epochs", tr.epochs, "Epochs (default 50)");
    t->add_option("--batch", tr.batch, "Batch size (default 16)");
    t->add_option("--lr", tr.lr, "Base learning rate (default 0.01)");
    t->add_option("--seed", tr.seed, "Run seed (default 0)");
    t->add_option("--workers", tr.workers, "Sample preparation threads (default 1)");
    t->add_option("--num-classes", tr.num_classes, "Classifier width (default: from the manifest)");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    e->add_option("--manifest", ev.manifest, "Dataset manifest (TSV)")->required()->check(CLI::ExistingFile);
    e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    e->add_option("--scores", ev.scores, "Write per-sample logits here");
    e->add_option("--modality", ev.modality, "Input stream (default: the one stored in the checkpoint)")
        ->check(modality_check);

    std::vector<std::string> fuse_files;
    auto* f = app.add_subcommand("fuse", "Average softmax scores of several streams");
    f->add_option("--scores", fuse_files, "Score files written by eval")
        ->required()
        ->expected(1, 4)
        ->check(CLI::ExistingFile);

    FlopsArgs fl;
    auto* c = app.add_subcommand("flops", "Report multiply-adds and parameters");
    c->add_option("--config", fl.config, "Model config file (default: built-in defaults)")->check(CLI::ExistingFile);
    c->add_option("--compare", fl.compare, "Second config; prints per-group ratios")->check(CLI::ExistingFile);
    c->add_flag("--csv", fl.csv, "CSV instead of aligned text")->capture_default_str();

    AugmentArgs au;
    auto* a = app.add_subcommand("augment", "Apply one augmentation to a sequence file");
    a->add_option("--in", au.in, "Input sequence")->required()->check(CLI::ExistingFile);
    a->add_option("--op", au.op, "Augmentation")
        ->required()
        ->check(CLI::IsMember({"rotation", "part_mask", "noise", "joint_mask"}));
    a->add_option("--seed", au.seed, "Seed")->capture_default_str();
    a->add_option("--out", au.out, "Output sequence")->required();
    a->add_option("--angle-bound", au.angle_bound, "rotation: angle bound in radians")->capture_default_str();
    a->add_option("--part", au.part, "part_mask: part index (-1: random)")->capture_default_str();
    a->add_option("--sigma", au.sigma, "noise: standard deviation")->capture_default_str();
    a->add_option("--count", au.count, "joint_mask: number of (frame, joint) cells")->capture_default_str();

    std::uint64_t gc_seed = 7;
    auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    g->add_option("--seed", gc_seed, "Seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kUserError;
    }

    try {
        if (*s) return run_synth(synth);
        if (*t) return run_train(tr);
        if (*e) return run_eval(ev);
        if (*f) return run_fuse(fuse_files);
        if (*c) return run_flops(fl);
        if (*a) return run_augment(au);
        if (*g) return run_gradcheck(gc_seed);
    } catch (const NonFiniteError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUserError;
    } catch (const std::invalid_argument& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUserError;
    } catch (const std::runtime_error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUserError;
    } catch (const std::exception& err) {
        std::cerr << "internal error: " << err.what() << '\n';
        return kInternalError;
    }
    return kInternalError;
}
