// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Tolerances are fixed here and must not be relaxed.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <iostream>
#include <sstream>
#include <string>

#include <pathossl/pathossl.hpp>

#include "gradient_check.hpp"

namespace fs = std::filesystem;
using namespace pathossl;

namespace {

// criterion 1
constexpr double kGradStep = 1e-3;
constexpr double kGradTolerance = 1e-3;
constexpr double kGradRequiredFraction = 0.99;
constexpr double kGradMaxSeconds = 60.0;
// criterion 2
constexpr double kLossTolerance = 1e-6;
// criterion 3
constexpr double kOverfitRatio = 0.10;
constexpr double kOverfitMaxSeconds = 60.0;
// criteria 4 and 5
constexpr double kMinTrainedAddr = 1.2;
constexpr double kRetrievalOverPrevalence = 0.05;
constexpr std::uint64_t kTrainSteps = 1000;
constexpr double kSeparationMaxSeconds = 15 * 60.0;
// criterion 8
constexpr double kStainTolerance = 1.5;
constexpr double kMinChannelStd = 2.0;
constexpr int kStainTiles = 50;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(precision);
    os << v;
    return os.str();
}

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    std::size_t checked = 0, mismatched = 0;
    double worst_seed_fraction = 0.0;
    std::uint64_t worst_seed = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto r = pathossl::testing::gradient_check(seed, kGradStep, kGradTolerance);
        checked += r.checked;
        mismatched += r.mismatched;
        if (r.mismatch_fraction() > worst_seed_fraction) {
            worst_seed_fraction = r.mismatch_fraction();
            worst_seed = seed;
        }
    }
    const double secs = seconds_since(t0);
    const double ok = 1.0 - static_cast<double>(mismatched) / static_cast<double>(checked);
    return {ok >= kGradRequiredFraction && secs < kGradMaxSeconds,
            "10 seeds, " + std::to_string(checked) + " parameters, " + fmt(100 * ok, 3) +
                "% within rel. error 1e-3 (need >= 99%; worst single seed " + std::to_string(worst_seed) + " at " +
                fmt(100 * (1 - worst_seed_fraction), 3) + "%), " + fmt(secs, 1) + " s"};
}

Outcome loss_identities() {
    const LossHyper h{1.0};
    const std::vector<float> origin{0, 0}, unit{1, 0}, diag{1, 1};
    const double cases[4][2] = {
        {contrastive_loss<float>(origin, origin, PairLabel::similar, h), 0.0},
        {contrastive_loss<float>(origin, origin, PairLabel::dissimilar, h), h.margin},
        {contrastive_loss<float>(origin, diag, PairLabel::similar, h), std::sqrt(2.0)},
        {contrastive_loss<float>(origin, unit, PairLabel::dissimilar, h), 0.0},
    };
    bool ok = true;
    std::string detail;
    for (const auto& c : cases) {
        ok = ok && std::abs(c[0] - c[1]) <= kLossTolerance;
        detail += (detail.empty() ? "" : ", ") + fmt(c[0], 6);
    }
    return {ok, "losses " + detail + " vs 0, m, sqrt(2), 0"};
}

Outcome overfit_sanity() {
    const auto t0 = Clock::now();
    SyntheticSlideSpec spec;
    spec.width = spec.height = 512;
    spec.tumor_fraction = 0.1;
    spec.rng_seed = 31;
    const std::vector<Slide> slides{generate_synthetic_slide(spec, 0)};
    SamplerConfig sc = SamplerConfig::scaled_to(32);
    sc.k_near = sc.k_far = 1;
    sc.d_near = 64;
    sc.d_far = 256;
    sc.rng_seed = 7;
    PairManifest all = sample_pairs(sampling_tiles(slides, 32, sc), 32, sc);
    PairManifest manifest;
    for (PairLabel want : {PairLabel::similar, PairLabel::dissimilar})
        for (const auto& p : all)
            if (p.label == want && manifest.size() < (want == PairLabel::similar ? 4u : 8u)) manifest.push_back(p);
    if (manifest.size() != 8) return {false, "could not draw 8 pairs"};

    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_steps = 300;
    cfg.augment = AugmentConfig::disabled();
    cfg.seed = 3;
    const Checkpoint init{init_params(cfg.seed)};
    const auto result = train(manifest, slides, cfg, init);

    std::vector<Image<float>> images;
    images.reserve(16);
    for (const auto& p : manifest) {
        images.push_back(training_input(slides[0], p.a, cfg, 0));
        images.push_back(training_input(slides[0], p.b, cfg, 0));
    }
    std::vector<PairSample<float>> batch;
    for (std::size_t i = 0; i < manifest.size(); ++i)
        batch.push_back({&images[2 * i], &images[2 * i + 1], manifest[i].label});
    const double before = batch_loss(init.params, std::span<const PairSample<float>>(batch), cfg.loss);
    const double after = batch_loss(result.checkpoint.params, std::span<const PairSample<float>>(batch), cfg.loss);
    const double secs = seconds_since(t0);
    return {after < kOverfitRatio * before && secs < kOverfitMaxSeconds,
            "mean loss " + fmt(before, 5) + " -> " + fmt(after, 5) + " (" + fmt(100 * after / before, 2) +
                "%, need < 10%), " + fmt(secs, 1) + " s"};
}

// The training and held-out slide sets shared by several criteria.
std::vector<Slide> training_slides() {
    std::vector<Slide> out;
    for (std::uint32_t i = 0; i < 3; ++i) {
        SyntheticSlideSpec s;
        s.tumor_fraction = 0.05;
        s.rng_seed = 1000 + i;
        out.push_back(generate_synthetic_slide(s, i));
    }
    return out;
}

std::vector<Slide> held_out_slides() {
    std::vector<Slide> out;
    for (std::uint32_t i = 0; i < 5; ++i) {
        SyntheticSlideSpec s;
        s.width = s.height = 640;
        s.tumor_fraction = 0.08;
        s.rng_seed = 5000 + i;
        out.push_back(generate_synthetic_slide(s, i));
    }
    return out;
}

struct SeedScores {
    double random_addr, trained_addr, random_retrieval, trained_retrieval, prevalence;
};

std::vector<SeedScores> separation_runs(double& secs) {
    const auto t0 = Clock::now();
    const auto train_slides = training_slides();
    const auto eval_slides = held_out_slides();
    const LabStats target = channel_stats(default_target_tile(train_slides, 32));

    std::vector<SeedScores> out;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        SamplerConfig sc = SamplerConfig::scaled_to(32);
        sc.k_near = sc.k_far = 8;
        sc.rng_seed = seed;
        const auto manifest = sample_pairs(sampling_tiles(train_slides, 32, sc), 32, sc);

        TrainConfig cfg;
        cfg.max_steps = kTrainSteps;
        cfg.seed = seed;
        const Checkpoint init{init_params(seed)};
        const auto trained = train(manifest, train_slides, cfg, init);

        const auto random_set = embed_all(init.params, eval_slides, target);
        const auto trained_set = embed_all(trained.checkpoint.params, eval_slides, target);
        const auto pairs = label_pairs(random_set, 8, 8, seed);  // same ids in both sets
        out.push_back({addr(random_set, pairs), addr(trained_set, pairs), retrieval_ratio(random_set),
                       retrieval_ratio(trained_set), tumor_prevalence(trained_set)});
        std::cout << "  seed " << seed << ": ADDR " << fmt(out.back().random_addr, 3) << " -> "
                  << fmt(out.back().trained_addr, 3) << ", retrieval " << fmt(out.back().random_retrieval, 3)
                  << " -> " << fmt(out.back().trained_retrieval, 3) << " (prevalence "
                  << fmt(out.back().prevalence, 3) << ", " << trained_set.size() << " descriptors)" << std::endl;
    }
    secs = seconds_since(t0);
    return out;
}

Outcome nn_oracle() {
    std::size_t queries = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(derive_seed(seed, {0x4E4E}));
        DescriptorSet set;
        set.dim = 16;
        std::vector<float> e(16);
        for (int i = 0; i < 200; ++i) {
            // coarse values make exact distance ties common
            for (auto& v : e) v = static_cast<float>(rng.below(3));
            set.push_back({static_cast<std::uint32_t>(rng.below(5)), i, 0},
                          rng.bernoulli(0.2) ? RegionLabel::tumor : RegionLabel::normal, e);
        }
        for (std::size_t q = 0; q < set.size(); ++q) {
            std::size_t best = set.size();
            double best_d = 0;
            for (std::size_t j = 0; j < set.size(); ++j) {
                if (set.ids[j].slide_id == set.ids[q].slide_id) continue;
                double d = 0;
                for (int k = 0; k < set.dim; ++k) {
                    const double diff = static_cast<double>(set.embedding(q)[k]) - set.embedding(j)[k];
                    d += diff * diff;
                }
                if (best == set.size() || d < best_d) {
                    best = j;
                    best_d = d;
                }
            }
            if (nearest_neighbor(q, set) != best)
                return {false, "seed " + std::to_string(seed) + " query " + std::to_string(q) + " differs"};
            ++queries;
        }
    }
    return {true, std::to_string(queries) + " queries over 5 seeds agree with brute force"};
}

Outcome sampler_correctness() {
    std::vector<Slide> big;
    for (std::uint32_t i = 0; i < 2; ++i) {
        SyntheticSlideSpec s;
        s.rng_seed = 90 + i;
        big.push_back(generate_synthetic_slide(s, i));
    }
    SamplerConfig ref = SamplerConfig::scaled_to(32);
    ref.rng_seed = 12;
    const auto ref_manifest = sample_pairs(sampling_tiles(big, 32, ref), 32, ref);
    const double near = 1792.0 * 32 / 224, far = 9408.0 * 32 / 224;
    std::size_t bad = 0, similar = 0, dissimilar = 0;
    for (const auto& p : ref_manifest) {
        const double d = center_distance(p.a, p.b, 32);
        if (p.label == PairLabel::similar) {
            ++similar;
            bad += !(d > 0 && d <= near);
        } else {
            ++dissimilar;
            bad += !(d >= far);
        }
    }

    const fs::path dir = fs::temp_directory_path() / "pathossl_acceptance_sampler";
    fs::create_directories(dir);
    write_pair_manifest(dir / "a.csv", ref_manifest);
    write_pair_manifest(dir / "b.csv", sample_pairs(sampling_tiles(big, 32, ref), 32, ref));
    write_pair_manifest(dir / "c.csv", sample_pairs(sampling_tiles(big, 32, ref), 32, ref, 4));
    const bool identical = detail::read_file(dir / "a.csv") == detail::read_file(dir / "b.csv") &&
                           detail::read_file(dir / "a.csv") == detail::read_file(dir / "c.csv");
    fs::remove_all(dir);
    return {bad == 0 && identical && similar > 0 && dissimilar > 0,
            std::to_string(ref_manifest.size()) + " pairs re-scanned (" + std::to_string(similar) + " similar), " +
                std::to_string(bad) +
                " violations; reruns " + (identical ? "byte-identical" : "DIFFER")};
}

// Exactly the normalisation used when embedding the held-out set: target is
// the default target tile of the training slides.
Outcome stain_contract() {
    const LabStats target = channel_stats(default_target_tile(training_slides(), 32));
    const auto slides = held_out_slides();

    Rng rng(6);
    int tested = 0, within = 0;
    double worst = 0.0;
    while (tested < kStainTiles) {
        const Slide& slide = slides[rng.below(slides.size())];
        const auto grid = tile_grid(slide, 32);
        const TileCoord c = grid[rng.below(grid.size())];
        if (tile_label(slide, c, 32) == RegionLabel::background) continue;
        const Tile t = extract_tile(slide, c, 32);
        const LabStats src = channel_stats(t);
        if (std::min({src.stddev[0], src.stddev[1], src.stddev[2]}) < kMinChannelStd) continue;
        const LabStats out = channel_stats(stain_normalize(t, target));
        double err = 0.0;
        for (int k = 0; k < 3; ++k)
            err = std::max({err, std::abs(out.mean[k] - target.mean[k]), std::abs(out.stddev[k] - target.stddev[k])});
        worst = std::max(worst, err);
        within += err <= kStainTolerance;
        ++tested;
    }

    int self_max_diff = 0;
    for (int i = 0; i < 20; ++i) {
        const Slide& slide = slides[rng.below(slides.size())];
        const TileCoord c{slide.slide_id, static_cast<int>(rng.below(640 - 32)), static_cast<int>(rng.below(640 - 32))};
        const Tile t = extract_tile(slide, c, 32);
        const Tile n = stain_normalize(t, channel_stats(t));
        for (std::size_t k = 0; k < t.rgb.size(); ++k) self_max_diff = std::max(self_max_diff, std::abs(n.rgb[k] - t.rgb[k]));
    }
    return {worst <= kStainTolerance && self_max_diff <= 1,
            std::to_string(within) + "/" + std::to_string(tested) + " tiles within 1.5, worst |mean/std - target| " +
                fmt(worst, 3) +
                " (need <= 1.5); self-normalization max pixel change " + std::to_string(self_max_diff)};
}

int shell(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism() {
    const fs::path root = fs::temp_directory_path() / "pathossl_acceptance_cli";
    fs::remove_all(root);
    const std::string cli = "\"" PATHO_SSL_CLI "\"";
    auto pipeline = [&](const std::string& name, int workers) -> std::optional<std::vector<char>> {
        const fs::path d = root / name;
        fs::create_directories(d);
        const std::string w = " --workers " + std::to_string(workers);
        const std::string q = "\"" + d.string() + "\"";
        const std::string quiet = " >>" + q + "/log.txt 2>&1";
        const std::vector<std::string> steps{
            cli + " gen-slides --count 3 --width 512 --height 512 --tumor-fraction 0.1 --seed 11 --out " + q +
                "/slides" + w,
            cli + " make-pairs --slides " + q + "/slides/slides.txt --out " + q +
                "/pairs.csv --k-near 8 --k-far 8 --d-far 320 --seed 12" + w,
            cli + " train --slides " + q + "/slides/slides.txt --pairs " + q + "/pairs.csv --out " + q +
                "/model.ck --steps 200 --seed 13" + w,
            cli + " embed --slides " + q + "/slides/slides.txt --checkpoint " + q + "/model.ck --out " + q +
                "/desc.bin" + w,
            cli + " eval --descriptors " + q + "/desc.bin --metrics " + q + "/metrics.csv --seed 14" + w,
        };
        for (const auto& s : steps)
            if (shell(s + quiet) != 0) {
                std::cout << "  step failed: " << s << std::endl;
                return std::nullopt;
            }
        return detail::read_file(d / "metrics.csv");
    };
    const auto a = pipeline("run1_w1", 1);
    const auto b = pipeline("run2_w1", 1);
    const auto c = pipeline("run3_w4", 4);
    if (!a || !b || !c) return {false, "pipeline step failed (see " + root.string() + ")"};
    const bool same = *a == *b && *a == *c;
    std::string metrics(a->begin(), a->end());
    std::replace(metrics.begin(), metrics.end(), '\n', ' ');
    if (same) fs::remove_all(root);
    return {same, std::string(same ? "identical" : "DIFFERENT") + " metric CSVs over 2 runs and workers 1/4: " +
                      metrics};
}

}  // namespace

int main(int argc, char** argv) {
    // optional arguments restrict the run to the named criteria, e.g. "C4 C5"
    const std::vector<std::string> only(argv + 1, argv + argc);
    auto selected = [&](const char* id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
    int failures = 0;
    auto report = [&](const char* id, const char* name, const Outcome& o) {
        std::cout << (o.pass ? "PASS " : "FAIL ") << id << ' ' << name << ": " << o.detail << std::endl;
        failures += !o.pass;
    };
    auto guarded = [](const std::function<Outcome()>& f) {
        try {
            return f();
        } catch (const std::exception& e) {
            return Outcome{false, std::string("exception: ") + e.what()};
        }
    };

    if (selected("C1")) report("C1", "gradient correctness", guarded(gradient_correctness));
    if (selected("C2")) report("C2", "loss identities", guarded(loss_identities));
    if (selected("C3")) report("C3", "overfit sanity", guarded(overfit_sanity));

    double secs = 0.0;
    std::vector<SeedScores> scores;
    std::string sep_error;
    if (selected("C4") || selected("C5")) try {
        scores = separation_runs(secs);
    } catch (const std::exception& e) {
        sep_error = std::string("exception: ") + e.what();
    }
    if (selected("C4")) {
        Outcome o{!scores.empty() && secs < kSeparationMaxSeconds, sep_error};
        int wins = 0;
        for (const auto& s : scores) wins += s.trained_addr >= kMinTrainedAddr && s.trained_addr > s.random_addr;
        o.pass = o.pass && wins == 3;
        if (sep_error.empty())
            o.detail = std::to_string(wins) + "/3 seeds with trained ADDR >= 1.2 and above random init, " +
                       fmt(secs, 0) + " s for criteria 4 and 5";
        report("C4", "separation improvement", o);
    }
    if (selected("C5")) {
        Outcome o{!scores.empty(), sep_error};
        int wins = 0;
        for (const auto& s : scores)
            wins += s.trained_retrieval > s.random_retrieval &&
                    s.trained_retrieval > s.prevalence + kRetrievalOverPrevalence;
        o.pass = o.pass && wins == 3;
        if (sep_error.empty())
            o.detail = std::to_string(wins) + "/3 seeds with trained retrieval above random init and prevalence + 0.05";
        report("C5", "retrieval improvement", o);
    }

    if (selected("C6")) report("C6", "nearest-neighbour oracle", guarded(nn_oracle));
    if (selected("C7")) report("C7", "sampler correctness", guarded(sampler_correctness));
    if (selected("C8")) report("C8", "stain normalization contract", guarded(stain_contract));
    if (selected("C9")) report("C9", "CLI determinism", guarded(cli_determinism));

    std::cout << (failures ? std::to_string(failures) + " criteria FAILED" : std::string("all criteria passed"))
              << std::endl;
    return failures ? 1 : 0;
}
