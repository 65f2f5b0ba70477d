#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "augment.hpp"
#include "checkpoint.hpp"
#include "color.hpp"
#include "error.hpp"
#include "net.hpp"
#include "pairs.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "slide.hpp"

namespace pathossl {

struct TrainConfig {
    int batch_size = 64;          // pairs per step
    std::uint64_t max_steps = 1000;  // absolute: training stops once the optimizer step reaches this
    AugmentConfig augment;
    LossHyper loss;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 0;  // 0: only at termination
    bool normalize_in_training = false;
    std::optional<LabStats> target_stats;  // required when normalize_in_training is set
    int tile_size = kDefaultTileSize;
    int workers = 1;

    void validate() const {
        if (batch_size < 2 || batch_size % 2 != 0) throw ContractError("batch_size must be even and >= 2");
        if (max_steps < 1) throw ContractError("max_steps must be >= 1");
        if (normalize_in_training && !target_stats)
            throw ContractError("normalize_in_training requires target stain statistics");
        augment.validate();
        loss.validate();
    }
};

struct TrainLogRecord {
    std::uint64_t step = 0;
    double loss = 0.0;
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<TrainLogRecord> records;

    /// Mean loss over a half-open range of record positions.
    double mean_loss(std::size_t begin, std::size_t end) const {
        double s = 0.0;
        for (std::size_t i = begin; i < end; ++i) s += records[i].loss;
        return end > begin ? s / static_cast<double>(end - begin) : 0.0;
    }

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out << "step,loss,seconds\n" << std::setprecision(9);
        for (const auto& r : records) out << r.step << ',' << r.loss << ',' << r.seconds << '\n';
        if (!out) throw IoError("failed writing " + path.string());
    }
};

struct TrainResult {
    Checkpoint checkpoint;
    TrainLog log;
};

/// Deterministic batch schedule: the manifest is reshuffled once per epoch
/// (seeded by cfg.seed and the epoch number) and step s (1-based) consumes
/// positions [(s-1)·B, s·B) of the concatenated epoch permutations. Any step
/// can therefore be reconstructed without replaying earlier ones.
class BatchSchedule {
public:
    BatchSchedule(std::size_t manifest_size, std::uint64_t seed) : size_(manifest_size), seed_(seed) {}

    std::vector<std::size_t> batch(std::uint64_t step, int batch_size) {
        std::vector<std::size_t> out;
        out.reserve(static_cast<std::size_t>(batch_size));
        const std::uint64_t first = (step - 1) * static_cast<std::uint64_t>(batch_size);
        for (std::uint64_t p = first; p < first + static_cast<std::uint64_t>(batch_size); ++p) {
            const std::uint64_t epoch = p / size_;
            if (!cached_epoch_ || *cached_epoch_ != epoch) {
                perm_.resize(size_);
                std::iota(perm_.begin(), perm_.end(), std::size_t{0});
                Rng rng(derive_seed(seed_, {0xE90C, epoch}));
                shuffle(perm_, rng);
                cached_epoch_ = epoch;
            }
            out.push_back(perm_[p % size_]);
        }
        return out;
    }

private:
    std::size_t size_;
    std::uint64_t seed_;
    std::optional<std::uint64_t> cached_epoch_;
    std::vector<std::size_t> perm_;
};

namespace detail {

inline std::map<std::uint32_t, const Slide*> index_slides(const std::vector<Slide>& slides) {
    std::map<std::uint32_t, const Slide*> m;
    for (const auto& s : slides) m[s.slide_id] = &s;
    return m;
}

}  // namespace detail

/// Prepares one branch input: crop, optional stain normalisation,
/// augmentation, scaling to [0,1]. Only pixel data of the slide is read.
inline Image<float> training_input(const Slide& slide, const TileCoord& coord, const TrainConfig& cfg,
                                   std::uint64_t draw_seed) {
    Tile t = extract_tile(slide, coord, cfg.tile_size);
    if (cfg.normalize_in_training) t = stain_normalize(t, *cfg.target_stats);
    t = augment(t, cfg.augment, draw_seed);
    return to_input<float>(t);
}

/// Runs Adam steps from the state in `init` up to cfg.max_steps. A checkpoint
/// without optimizer state starts at step 0. Checkpoints are written to
/// `checkpoint_path` at the configured cadence and at termination; on
/// divergence the last good state is written before the error propagates.
inline TrainResult train(const PairManifest& manifest, const std::vector<Slide>& slides, const TrainConfig& cfg,
                         Checkpoint init, const std::optional<std::filesystem::path>& checkpoint_path = {}) {
    cfg.validate();
    if (manifest.empty()) throw ContractError("training manifest is empty");
    if (init.params.arch.tile_size != cfg.tile_size)
        throw ContractError("checkpoint tile_size " + std::to_string(init.params.arch.tile_size) +
                            " does not match configured " + std::to_string(cfg.tile_size));
    if (init.trainer && init.trainer->batch_size != static_cast<std::uint32_t>(cfg.batch_size))
        throw ContractError("checkpoint was trained with batch_size " + std::to_string(init.trainer->batch_size) +
                            ", configured " + std::to_string(cfg.batch_size));
    if (init.trainer && init.trainer->seed != cfg.seed)
        throw ContractError("checkpoint was trained with a different seed");

    const auto by_id = detail::index_slides(slides);
    for (const auto& p : manifest)
        for (const auto* c : {&p.a, &p.b})
            if (!by_id.count(c->slide_id))
                throw IoError("pair manifest references missing slide " + std::to_string(c->slide_id));

    Checkpoint ck = std::move(init);
    if (!ck.adam) ck.adam = AdamState::zeros_like(ck.params.tensors, cfg.adam);
    ck.trainer = TrainerMeta{static_cast<std::uint32_t>(cfg.batch_size), cfg.seed};

    TrainResult result;
    BatchSchedule schedule(manifest.size(), cfg.seed);
    const auto start = std::chrono::steady_clock::now();
    auto save = [&](const Checkpoint& c) {
        if (checkpoint_path) write_checkpoint(*checkpoint_path, c);
    };

    const auto B = static_cast<std::size_t>(cfg.batch_size);
    std::vector<Image<float>> inputs(2 * B);
    std::vector<PairSample<float>> samples(B);
    while (ck.adam->step < cfg.max_steps) {
        const std::uint64_t step = ck.adam->step + 1;
        const auto idx = schedule.batch(step, cfg.batch_size);
        parallel_for(B, cfg.workers, [&](std::size_t i) {
            const PairRecord& rec = manifest[idx[i]];
            inputs[2 * i] = training_input(*by_id.at(rec.a.slide_id), rec.a, cfg, derive_seed(cfg.seed, {step, i, 0}));
            inputs[2 * i + 1] =
                training_input(*by_id.at(rec.b.slide_id), rec.b, cfg, derive_seed(cfg.seed, {step, i, 1}));
            samples[i] = {&inputs[2 * i], &inputs[2 * i + 1], rec.label};
        });

        BatchGradient g;
        try {
            g = backward(ck.params, std::span<const PairSample<float>>(samples), cfg.loss, cfg.workers);
        } catch (const DivergenceError&) {
            save(ck);
            throw;
        }
        Checkpoint next = ck;
        adam_step(next.params.tensors, g.grads, *next.adam);
        for (const auto& t : next.params.tensors)
            for (float v : t.data)
                if (!std::isfinite(v)) {
                    save(ck);
                    throw DivergenceError("non-finite parameter after step " + std::to_string(step));
                }
        ck = std::move(next);

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.records.push_back({step, g.mean_loss, secs});
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) save(ck);
    }
    save(ck);
    result.checkpoint = std::move(ck);
    return result;
}

/// Continues a saved run; the checkpoint must carry optimizer and trainer state
/// consistent with `cfg`.
inline TrainResult resume(const Checkpoint& checkpoint, const PairManifest& manifest, const std::vector<Slide>& slides,
                          const TrainConfig& cfg, const std::optional<std::filesystem::path>& checkpoint_path = {}) {
    if (!checkpoint.adam || !checkpoint.trainer)
        throw ContractError("resume requires a checkpoint with optimizer and trainer state");
    if (!(checkpoint.adam->config == cfg.adam)) throw ContractError("optimizer hyper-parameters differ from checkpoint");
    return train(manifest, slides, cfg, checkpoint, checkpoint_path);
}

}  // namespace pathossl
