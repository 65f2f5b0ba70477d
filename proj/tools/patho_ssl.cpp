// patho_ssl: command-line front end for the self-supervised tile similarity
// pipeline (gen-slides -> make-pairs -> train -> embed -> eval).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <pathossl/pathossl.hpp>

namespace fs = std::filesystem;
using namespace pathossl;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr const char* kSeedEnv = "PATHO_SSL_SEED";

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
    if (flag) return *flag;
    if (const char* env = std::getenv(kSeedEnv)) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used == std::string(env).size()) return v;
        } catch (const std::exception&) {
        }
        throw UsageError(std::string(kSeedEnv) + " is not an unsigned integer: '" + env + "'");
    }
    return 0;
}

// Reads `key=value` lines ('#' comments, blank lines ignored) and turns them
// into `--key=value` arguments. They are placed in front of the user's own
// flags so that explicit flags win.
std::vector<std::string> config_arguments(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    std::vector<std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || key == "config")
            throw UsageError(path.string() + ":" + std::to_string(lineno) + ": invalid key '" + key + "'");
        out.push_back("--" + key + "=" + value);
    }
    return out;
}

std::vector<std::string> expand_config(int argc, char** argv, const std::vector<std::string>& subcommands) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::optional<fs::path> config;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config = args[i].substr(9);
        }
    }
    if (!config) return args;
    const auto extra = config_arguments(*config);
    std::size_t insert_at = 0;
    for (std::size_t i = 0; i < args.size(); ++i)
        if (std::find(subcommands.begin(), subcommands.end(), args[i]) != subcommands.end()) {
            insert_at = i + 1;
            break;
        }
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(insert_at), extra.begin(), extra.end());
    return args;
}

void print_fixed(std::ostream& os, double v, int precision = 4) {
    os << std::fixed << std::setprecision(precision) << v << std::defaultfloat;
}

LabStats target_stats_for(const std::optional<fs::path>& target_tile, const std::vector<Slide>& slides,
                          int tile_size, double background_threshold) {
    if (target_tile) return channel_stats(read_tile(*target_tile));
    return channel_stats(default_target_tile(slides, tile_size, background_threshold));
}

// ---------------------------------------------------------------- gen-slides

struct GenOptions {
    int count = 20;
    fs::path out_dir;
    SyntheticSlideSpec spec;
    std::optional<std::uint64_t> seed;
    int workers = 1;
};

int cmd_gen_slides(const GenOptions& o) {
    const std::uint64_t seed = resolve_seed(o.seed);
    try {
        o.spec.validate();
    } catch (const InvalidSpecError& e) {
        throw UsageError(e.what());
    }
    fs::create_directories(o.out_dir);

    std::vector<std::string> names(static_cast<std::size_t>(o.count));
    std::vector<std::array<double, 3>> fractions(names.size());
    parallel_for(names.size(), o.workers, [&](std::size_t i) {
        SyntheticSlideSpec spec = o.spec;
        spec.rng_seed = derive_seed(seed, {i});
        const Slide s = generate_synthetic_slide(spec, static_cast<std::uint32_t>(i));
        std::ostringstream name;
        name << "slide_" << std::setw(3) << std::setfill('0') << i << ".ppm";
        names[i] = name.str();
        write_slide(s, o.out_dir / names[i]);
        fractions[i] = label_fractions(s);
    });
    write_slide_manifest(o.out_dir / "slides.txt", names);

    std::array<double, 3> mean{};
    std::cout << "slide,background,normal,tumor\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
        std::cout << names[i];
        for (int c = 0; c < 3; ++c) {
            std::cout << ',';
            print_fixed(std::cout, fractions[i][c]);
            mean[c] += fractions[i][c] / static_cast<double>(names.size());
        }
        std::cout << '\n';
    }
    if (!names.empty()) {
        std::cout << "mean";
        for (double m : mean) {
            std::cout << ',';
            print_fixed(std::cout, m);
        }
        std::cout << '\n';
    }
    std::cout << "wrote " << names.size() << " slides and " << (o.out_dir / "slides.txt").string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- make-pairs

struct PairOptions {
    fs::path slides;
    fs::path out;
    int tile_size = kDefaultTileSize;
    int k_near = 32;
    int k_far = 32;
    std::optional<double> d_near;
    std::optional<double> d_far;
    bool include_background = false;
    double background_threshold = kDefaultBackgroundThreshold;
    std::optional<std::uint64_t> seed;
    int workers = 1;
};

int cmd_make_pairs(const PairOptions& o) {
    SamplerConfig cfg = SamplerConfig::scaled_to(o.tile_size);
    if (o.d_near) cfg.d_near = *o.d_near;
    if (o.d_far) cfg.d_far = *o.d_far;
    cfg.k_near = o.k_near;
    cfg.k_far = o.k_far;
    cfg.exclude_background = !o.include_background;
    cfg.background_threshold = o.background_threshold;
    cfg.rng_seed = resolve_seed(o.seed);
    try {
        cfg.validate();
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }

    const auto slides = load_slides(o.slides);
    const auto manifest = sample_pairs(sampling_tiles(slides, o.tile_size, cfg), o.tile_size, cfg, o.workers);
    write_pair_manifest(o.out, manifest);
    std::size_t similar = 0;
    for (const auto& p : manifest) similar += p.label == PairLabel::similar;
    std::cout << "slides " << slides.size() << "  d_near " << cfg.d_near << "  d_far " << cfg.d_far << '\n'
              << "similar " << similar << '\n'
              << "dissimilar " << manifest.size() - similar << '\n'
              << "total " << manifest.size() << "  -> " << o.out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
    fs::path slides;
    fs::path pairs;
    fs::path out;
    std::optional<fs::path> log;
    std::optional<fs::path> init;
    std::optional<fs::path> target_tile;
    TrainConfig cfg;
    bool no_augment = false;
    std::optional<std::uint64_t> seed;
};

int cmd_train(TrainOptions o) {
    TrainConfig& cfg = o.cfg;
    cfg.seed = resolve_seed(o.seed);
    if (o.no_augment) {
        const auto seed = cfg.augment.rng_seed;
        cfg.augment = AugmentConfig::disabled();
        cfg.augment.rng_seed = seed;
    }
    const auto slides = load_slides(o.slides);
    if (cfg.normalize_in_training)
        cfg.target_stats = target_stats_for(o.target_tile, slides, cfg.tile_size, kDefaultBackgroundThreshold);
    try {
        cfg.validate();
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
    const auto manifest = read_pair_manifest(o.pairs);

    TrainResult result;
    if (o.init) {
        Checkpoint ck = read_checkpoint(*o.init);
        if (ck.adam) {
            std::cout << "resuming from step " << ck.adam->step << '\n';
            result = resume(ck, manifest, slides, cfg, o.out);
        } else {
            result = train(manifest, slides, cfg, std::move(ck), o.out);
        }
    } else {
        Architecture arch;
        arch.tile_size = cfg.tile_size;
        result = train(manifest, slides, cfg, Checkpoint{init_params(cfg.seed, arch)}, o.out);
    }
    result.log.write_csv(o.log.value_or(fs::path(o.out.string() + ".log.csv")));

    const auto& recs = result.log.records;
    std::cout << "pairs " << manifest.size() << "  steps run " << recs.size() << "  final step "
              << result.checkpoint.adam->step << '\n';
    if (!recs.empty()) {
        const std::size_t tenth = std::max<std::size_t>(1, recs.size() / 10);
        std::cout << "mean loss first 10%: ";
        print_fixed(std::cout, result.log.mean_loss(0, tenth), 6);
        std::cout << "  last 10%: ";
        print_fixed(std::cout, result.log.mean_loss(recs.size() - tenth, recs.size()), 6);
        std::cout << "  (" << recs.back().seconds << " s)\n";
    }
    std::cout << "checkpoint -> " << o.out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- embed

struct EmbedCmdOptions {
    fs::path slides;
    fs::path checkpoint;
    fs::path out;
    std::optional<fs::path> target_tile;
    bool include_background = false;
    double background_threshold = kDefaultBackgroundThreshold;
    std::optional<fs::path> dump_normalized;
    int dump_count = 16;
    int workers = 1;
};

int cmd_embed(const EmbedCmdOptions& o) {
    const Checkpoint ck = read_checkpoint(o.checkpoint);
    const auto slides = load_slides(o.slides);
    EmbedOptions opt;
    opt.tile_size = ck.params.arch.tile_size;
    opt.exclude_background = !o.include_background;
    opt.background_threshold = o.background_threshold;
    opt.workers = o.workers;
    const LabStats target = target_stats_for(o.target_tile, slides, opt.tile_size, o.background_threshold);

    const DescriptorSet set = embed_all(ck.params, slides, target, opt);
    write_descriptors(o.out, set);

    if (o.dump_normalized) {
        fs::create_directories(*o.dump_normalized);
        const auto n = std::min<std::size_t>(set.size(), static_cast<std::size_t>(std::max(0, o.dump_count)));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& id = set.ids[i];
            std::ostringstream name;
            name << "tile_s" << id.slide_id << "_x" << id.x << "_y" << id.y << ".ppm";
            write_tile(stain_normalize(extract_tile(slides.at(id.slide_id), id, opt.tile_size), target),
                       *o.dump_normalized / name.str());
        }
        std::cout << "dumped " << n << " normalised tiles to " << o.dump_normalized->string() << '\n';
    }

    std::cout << "descriptors " << set.size() << "  tumor " << set.count(RegionLabel::tumor) << "  normal "
              << set.count(RegionLabel::normal) << "  background " << set.count(RegionLabel::background)
              << "  -> " << o.out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
    fs::path descriptors;
    fs::path metrics;
    std::optional<fs::path> projection;
    std::string pairing = "label";
    int k_similar = 8;
    int k_dissimilar = 8;
    int tile_size = kDefaultTileSize;
    std::optional<std::uint64_t> seed;
    int workers = 1;
};

int cmd_eval(const EvalOptions& o) {
    const std::uint64_t seed = resolve_seed(o.seed);
    const DescriptorSet set = read_descriptors(o.descriptors);

    EvalPairSet pairs;
    if (o.pairing == "label") {
        pairs = label_pairs(set, o.k_similar, o.k_dissimilar, seed);
    } else {
        SamplerConfig cfg = SamplerConfig::scaled_to(o.tile_size);
        cfg.k_near = o.k_similar;
        cfg.k_far = o.k_dissimilar;
        cfg.rng_seed = seed;
        pairs = spatial_pairs(set, o.tile_size, cfg);
    }
    const double a = addr(set, pairs);
    const double r = retrieval_ratio(set, o.workers);
    write_metrics_csv(o.metrics, {{"addr", a}, {"retrieval_ratio", r}});
    if (o.projection) write_projection_csv(*o.projection, set, pca_project(set, 2));

    std::cout << std::setprecision(12) << "metric,value\n"
              << "addr," << a << '\n'
              << "retrieval_ratio," << r << '\n'
              << std::setprecision(6) << "(descriptors " << set.size() << ", eval pairs " << pairs.size()
              << ", tumor prevalence " << tumor_prevalence(set) << ")\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised tile similarity pipeline: synthetic slides, spatial pair sampling, "
                 "siamese contrastive training, descriptor extraction and retrieval evaluation."};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    app.footer(std::string("Any subcommand accepts --config FILE with key=value lines named after its long flags; "
                           "explicit flags override the file. Seeds default to $") +
               kSeedEnv + " when set, else 0.\nExit codes: 0 ok, 1 usage, 2 data/format error, 3 divergence.");

    const auto add_config = [](CLI::App* sub) {
        sub->add_option("--config", "key=value file with defaults for this subcommand");
    };
    const auto add_seed = [](CLI::App* sub, std::optional<std::uint64_t>& seed) {
        sub->add_option("--seed", seed, std::string("RNG seed (default: $") + kSeedEnv + " or 0)");
    };
    const auto add_workers = [](CLI::App* sub, int& workers) {
        sub->add_option("--workers", workers, "Worker threads; results are identical for any value")
            ->check(CLI::PositiveNumber);
    };

    GenOptions gen;
    auto* g = app.add_subcommand("gen-slides", "Generate labelled synthetic slides and a slide manifest");
    g->add_option("--count", gen.count, "Number of slides")->check(CLI::NonNegativeNumber);
    g->add_option("--out", gen.out_dir, "Output directory")->required();
    g->add_option("--width", gen.spec.width, "Slide width in pixels");
    g->add_option("--height", gen.spec.height, "Slide height in pixels");
    g->add_option("--tumor-fraction", gen.spec.tumor_fraction, "Target tumor pixel fraction");
    g->add_option("--background-fraction", gen.spec.background_fraction, "Target background pixel fraction");
    g->add_option("--min-region-diameter", gen.spec.min_region_diameter, "Smallest region diameter in pixels");
    g->add_option("--tile-size", gen.spec.tile_size, "Tile size the regions are sized against");
    add_seed(g, gen.seed);
    add_workers(g, gen.workers);
    add_config(g);

    PairOptions pr;
    auto* p = app.add_subcommand("make-pairs", "Sample similar/dissimilar tile pairs by spatial distance");
    p->add_option("--slides", pr.slides, "Slide manifest")->required();
    p->add_option("--out", pr.out, "Pair manifest CSV to write")->required();
    p->add_option("--tile-size", pr.tile_size, "Tile size in pixels")->check(CLI::PositiveNumber);
    p->add_option("--k-near", pr.k_near, "Similar partners per anchor")->check(CLI::NonNegativeNumber);
    p->add_option("--k-far", pr.k_far, "Dissimilar partners per anchor")->check(CLI::NonNegativeNumber);
    p->add_option("--d-near", pr.d_near, "Similar threshold in pixels (default: 1792 * tile/224)");
    p->add_option("--d-far", pr.d_far, "Dissimilar threshold in pixels (default: 9408 * tile/224)");
    p->add_flag("--include-background", pr.include_background, "Also sample background tiles");
    p->add_option("--background-threshold", pr.background_threshold, "Background fraction above which a tile is glass")
        ->check(CLI::Range(0.0, 1.0));
    add_seed(p, pr.seed);
    add_workers(p, pr.workers);
    add_config(p);

    TrainOptions tr;
    auto* t = app.add_subcommand("train", "Train the siamese embedding network (resumes from --init when it "
                                          "carries optimizer state)");
    t->add_option("--slides", tr.slides, "Slide manifest")->required();
    t->add_option("--pairs", tr.pairs, "Pair manifest CSV")->required();
    t->add_option("--out", tr.out, "Checkpoint to write")->required();
    t->add_option("--log", tr.log, "Training log CSV (default: <out>.log.csv)");
    t->add_option("--init", tr.init, "Start from this checkpoint");
    t->add_option("--batch-size", tr.cfg.batch_size, "Pairs per step (even)");
    t->add_option("--steps", tr.cfg.max_steps, "Stop once the optimizer step counter reaches this value");
    t->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "Checkpoint cadence in steps (0: only at the end)");
    t->add_option("--margin", tr.cfg.loss.margin, "Contrastive margin");
    t->add_option("--lr", tr.cfg.adam.lr, "Adam learning rate");
    t->add_option("--beta1", tr.cfg.adam.beta1, "Adam beta1");
    t->add_option("--beta2", tr.cfg.adam.beta2, "Adam beta2");
    t->add_option("--eps", tr.cfg.adam.eps, "Adam epsilon");
    t->add_flag("--no-augment", tr.no_augment, "Disable flips, rotation and colour jitter");
    t->add_option("--flip-probability", tr.cfg.augment.flip_probability, "Probability of each flip");
    t->add_option("--max-rotation", tr.cfg.augment.max_rotation_deg, "Largest rotation in degrees");
    t->add_option("--jitter", tr.cfg.augment.jitter, "Brightness/saturation/hue jitter amplitude");
    t->add_flag("--normalize-in-training", tr.cfg.normalize_in_training, "Stain-normalise training tiles");
    t->add_option("--target-tile", tr.target_tile, "PPM tile whose LAB statistics are the normalisation target "
                                                   "(default: first tissue tile of the first slide)");
    t->add_option("--tile-size", tr.cfg.tile_size, "Tile size in pixels")->check(CLI::Range(8, 4096));
    add_seed(t, tr.seed);
    add_workers(t, tr.cfg.workers);
    add_config(t);

    EmbedCmdOptions em;
    auto* e = app.add_subcommand("embed", "Embed every tissue grid tile into a descriptor file");
    e->add_option("--slides", em.slides, "Slide manifest")->required();
    e->add_option("--checkpoint", em.checkpoint, "Trained checkpoint")->required();
    e->add_option("--out", em.out, "Descriptor file to write")->required();
    e->add_option("--target-tile", em.target_tile, "PPM tile whose LAB statistics are the normalisation target "
                                                   "(default: first tissue tile of the first slide)");
    e->add_flag("--include-background", em.include_background, "Also embed background tiles");
    e->add_option("--background-threshold", em.background_threshold, "Background fraction above which a tile is glass")
        ->check(CLI::Range(0.0, 1.0));
    e->add_option("--dump-normalized", em.dump_normalized, "Directory for PPM dumps of normalised tiles");
    e->add_option("--dump-count", em.dump_count, "Number of tiles to dump");
    add_workers(e, em.workers);
    add_config(e);

    EvalOptions ev;
    auto* v = app.add_subcommand("eval", "Compute ADDR and cross-slide tumor retrieval ratio");
    v->add_option("--descriptors", ev.descriptors, "Descriptor file")->required();
    v->add_option("--metrics", ev.metrics, "Metrics CSV to write")->required();
    v->add_option("--projection", ev.projection, "Optional 2-D PCA projection CSV");
    v->add_option("--pairing", ev.pairing, "Evaluation pairs: label (ground truth) or spatial")
        ->check(CLI::IsMember({"label", "spatial"}));
    v->add_option("--k-similar", ev.k_similar, "Similar pairs per anchor")->check(CLI::NonNegativeNumber);
    v->add_option("--k-dissimilar", ev.k_dissimilar, "Dissimilar pairs per anchor")->check(CLI::NonNegativeNumber);
    v->add_option("--tile-size", ev.tile_size, "Tile size, used by spatial pairing")->check(CLI::PositiveNumber);
    add_seed(v, ev.seed);
    add_workers(v, ev.workers);
    add_config(v);

    try {
        auto args = expand_config(argc, argv, {"gen-slides", "make-pairs", "train", "embed", "eval"});
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUsage;
    }

    try {
        if (*g) return cmd_gen_slides(gen);
        if (*p) return cmd_make_pairs(pr);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_embed(em);
        if (*v) return cmd_eval(ev);
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUsage;
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return static_cast<int>(err.category());
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kData;
    }
    return kUsage;
}
