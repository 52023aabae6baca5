#include "motionmask/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include <spdlog/spdlog.h>

#include "motionmask/errors.hpp"

namespace motionmask {

namespace {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* end = value.data() + value.size();
    const auto res = std::from_chars(value.data(), end, out);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
    }
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const PipelineConfig&)> get;
    std::function<void(PipelineConfig&, const std::string&)> set;
};

template <typename T>
Field size_field(std::string key, T PipelineConfig::*member_owner, std::size_t T::*member) {
    return {key, [=](const PipelineConfig& c) { return std::to_string(c.*member_owner.*member); },
            [=](PipelineConfig& c, const std::string& v) {
                (c.*member_owner).*member = parse_number<std::size_t>(std::string(key), v);
            }};
}

template <typename T>
Field real_field(std::string key, T PipelineConfig::*member_owner, double T::*member) {
    return {key, [=](const PipelineConfig& c) { return format_double(c.*member_owner.*member); },
            [=](PipelineConfig& c, const std::string& v) {
                (c.*member_owner).*member = parse_number<double>(std::string(key), v);
            }};
}

const std::vector<Field>& fields() {
    using C = PipelineConfig;
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back({"profile", [](const C& c) { return c.profile; },
                     [](C& c, const std::string& v) { c.profile = v; }});
        f.push_back({"seed", [](const C& c) { return std::to_string(c.seed); },
                     [](C& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }});

        f.push_back(size_field("synth.sequences", &C::synth, &SynthConfig::num_sequences));
        f.push_back(size_field("synth.frames", &C::synth, &SynthConfig::frames));
        f.push_back({"synth.layout",
                     [](const C& c) {
                         const auto& w = c.synth.layout.widths;
                         return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]) +
                                "," + std::to_string(w[3]);
                     },
                     [](C& c, const std::string& v) {
                         std::stringstream in(v);
                         std::string item;
                         std::size_t i = 0;
                         while (std::getline(in, item, ',')) {
                             if (i >= kPartCount) {
                                 throw ConfigError("synth.layout: expected 4 comma-separated widths");
                             }
                             c.synth.layout.widths[i++] = parse_number<std::size_t>("synth.layout", trim(item));
                         }
                         if (i != kPartCount) {
                             throw ConfigError("synth.layout: expected 4 comma-separated widths");
                         }
                     }});
        f.push_back(real_field("synth.fps", &C::synth, &SynthConfig::fps));
        f.push_back(real_field("synth.event_rate", &C::synth, &SynthConfig::event_rate));
        f.push_back(real_field("synth.noise", &C::synth, &SynthConfig::noise_level));
        f.push_back(size_field("synth.shapes", &C::synth, &SynthConfig::num_shapes));
        f.push_back(size_field("synth.slot_frames", &C::synth, &SynthConfig::slot_frames));
        f.push_back(size_field("synth.min_event_frames", &C::synth, &SynthConfig::min_event_frames));
        f.push_back(real_field("synth.idle_amplitude", &C::synth, &SynthConfig::idle_amplitude));

        f.push_back(size_field("rvq.dim", &C::rvq, &RvqConfig::dim));
        f.push_back(size_field("rvq.entries", &C::rvq, &RvqConfig::entries));
        f.push_back(size_field("rvq.layers", &C::rvq, &RvqConfig::layers));
        f.push_back(size_field("rvq.encoder_hidden", &C::rvq, &RvqConfig::encoder_hidden));
        f.push_back(size_field("rvq.decoder_hidden", &C::rvq, &RvqConfig::decoder_hidden));
        f.push_back(real_field("rvq.commitment", &C::rvq, &RvqConfig::commitment));
        f.push_back(real_field("rvq.ema_decay", &C::rvq, &RvqConfig::ema_decay));
        f.push_back(real_field("rvq.quantizer_dropout", &C::rvq, &RvqConfig::quantizer_dropout));
        f.push_back(size_field("rvq.dead_code_batches", &C::rvq, &RvqConfig::dead_code_batches));
        f.push_back(size_field("rvq.epochs", &C::rvq, &RvqConfig::epochs));
        f.push_back(size_field("rvq.batch", &C::rvq, &RvqConfig::batch));
        f.push_back(real_field("rvq.lr", &C::rvq, &RvqConfig::lr));
        f.push_back(real_field("rvq.beta1", &C::rvq, &RvqConfig::beta1));
        f.push_back(real_field("rvq.beta2", &C::rvq, &RvqConfig::beta2));

        f.push_back(size_field("mam.queries", &C::mam, &MamConfig::queries));
        f.push_back(size_field("mam.width", &C::mam, &MamConfig::width));
        f.push_back(size_field("mam.heads", &C::mam, &MamConfig::heads));
        f.push_back(size_field("mam.hidden", &C::mam, &MamConfig::hidden));
        f.push_back(size_field("mam.shared_blocks", &C::mam, &MamConfig::shared_blocks));
        f.push_back(real_field("mam.tau", &C::mam, &MamConfig::tau));
        f.push_back(size_field("mam.epochs", &C::mam, &MamConfig::epochs));
        f.push_back(size_field("mam.batch", &C::mam, &MamConfig::batch));
        f.push_back(real_field("mam.lr", &C::mam, &MamConfig::lr));
        f.push_back(real_field("mam.beta1", &C::mam, &MamConfig::beta1));
        f.push_back(real_field("mam.beta2", &C::mam, &MamConfig::beta2));

        f.push_back(size_field("mask.width", &C::mask, &MaskConfig::width));
        f.push_back(size_field("mask.heads", &C::mask, &MaskConfig::heads));
        f.push_back(size_field("mask.hidden", &C::mask, &MaskConfig::hidden));
        f.push_back(size_field("mask.blocks", &C::mask, &MaskConfig::blocks));
        f.push_back(size_field("mask.score_width", &C::mask, &MaskConfig::score_width));
        f.push_back(real_field("mask.ema_decay", &C::mask, &MaskConfig::ema_decay));
        f.push_back(real_field("mask.sem_weight", &C::mask, &MaskConfig::sem_weight));
        f.push_back(size_field("mask.epochs", &C::mask, &MaskConfig::epochs));
        f.push_back(size_field("mask.batch", &C::mask, &MaskConfig::batch));
        f.push_back(real_field("mask.lr", &C::mask, &MaskConfig::lr));
        f.push_back(real_field("mask.beta1", &C::mask, &MaskConfig::beta1));
        f.push_back(real_field("mask.beta2", &C::mask, &MaskConfig::beta2));

        f.push_back(real_field("schedule.alpha", &C::schedule, &MaskSchedule::alpha));
        f.push_back(real_field("schedule.soft_start", &C::schedule, &MaskSchedule::soft_start));
        f.push_back(real_field("schedule.soft_end", &C::schedule, &MaskSchedule::soft_end));
        f.push_back(real_field("schedule.hard_start", &C::schedule, &MaskSchedule::hard_start));
        f.push_back(real_field("schedule.hard_end", &C::schedule, &MaskSchedule::hard_end));
        f.push_back(real_field("schedule.total_epochs", &C::schedule, &MaskSchedule::total_epochs));

        f.push_back({"strategy", [](const C& c) { return std::string(strategy_name(c.strategy)); },
                     [](C& c, const std::string& v) { c.strategy = strategy_from_name(v); }});
        f.push_back({"infer.steps", [](const C& c) { return std::to_string(c.steps); },
                     [](C& c, const std::string& v) { c.steps = parse_number<std::size_t>("infer.steps", v); }});
        f.push_back({"eval.sequences", [](const C& c) { return std::to_string(c.eval_sequences); },
                     [](C& c, const std::string& v) {
                         c.eval_sequences = parse_number<std::size_t>("eval.sequences", v);
                     }});
        f.push_back({"eval.bc_sigma", [](const C& c) { return format_double(c.bc_sigma); },
                     [](C& c, const std::string& v) { c.bc_sigma = parse_number<double>("eval.bc_sigma", v); }});
        return f;
    }();
    return table;
}

// Widths that one stage dictates to the next.
void sync_derived(PipelineConfig& c) {
    c.mam.latent_dim = c.rvq.dim;
    c.mam.low_channels = c.synth.low_channels();
    c.mam.high_channels = c.synth.high_channels();
    c.mask.latent_dim = c.rvq.dim;
    c.mask.entries = c.rvq.entries;
    c.mask.speech_width = c.mam.width;
}

} // namespace

void PipelineConfig::validate() const {
    synth.validate();
    rvq.validate();
    mam.validate();
    mask.validate();
    schedule.validate();
    if (mam.latent_dim != rvq.dim || mask.latent_dim != rvq.dim) {
        throw ConfigError("config: latent width differs between rvq, mam and mask stages");
    }
    if (mask.entries != rvq.entries) {
        throw ConfigError("config: mask.entries must equal rvq.entries");
    }
    if (mask.speech_width != mam.width) {
        throw ConfigError("config: mask speech width must equal mam.width");
    }
    if (mam.low_channels != synth.low_channels() || mam.high_channels != synth.high_channels()) {
        throw ConfigError("config: mam feature channels do not match the corpus");
    }
    if (latent_frames(synth.frames) > mam.queries) {
        throw ConfigError("config: clips of " + std::to_string(synth.frames) + " frames need " +
                          std::to_string(latent_frames(synth.frames)) + " queries, mam.queries is " +
                          std::to_string(mam.queries));
    }
    if (steps == 0) {
        throw ConfigError("config: infer.steps must be at least 1");
    }
    if (eval_sequences < 2) {
        throw ConfigError("config: eval.sequences must be at least 2");
    }
    if (!(bc_sigma > 0.0)) {
        throw ConfigError("config: eval.bc_sigma must be positive");
    }
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(*this, value);
            sync_derived(*this);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

std::string PipelineConfig::to_text() const {
    std::string out;
    for (const auto& f : fields()) {
        out += f.key + "=" + f.get(*this) + "\n";
    }
    return out;
}

std::map<std::string, std::string> PipelineConfig::to_map() const {
    std::map<std::string, std::string> out;
    for (const auto& f : fields()) {
        out[f.key] = f.get(*this);
    }
    return out;
}

PipelineConfig profile_config(const std::string& name) {
    PipelineConfig c;
    c.profile = name;
    if (name == "toy") {
        c.mask.epochs = 40;
        c.mask.batch = 16;
        c.schedule.total_epochs = 40.0;
    } else if (name == "paper") {
        c.rvq.entries = 256;
        c.mask.epochs = 200;
        c.mask.batch = 64;
        c.mask.lr = 1e-4;
        c.schedule.total_epochs = 200.0;
    } else {
        throw ConfigError("unknown profile '" + name + "' (expected toy or paper)");
    }
    sync_derived(c);
    return c;
}

PipelineConfig parse_config(const std::string& text, PipelineConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
        }
        base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

PipelineConfig load_config(const std::string& path, PipelineConfig base) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path);
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), std::move(base));
}

// ---------------------------------------------------------------------------

std::vector<MamExample> prepare_mam_examples(const MotionTokenizer& tokenizer, std::span<const SynthSample> samples) {
    std::vector<MamExample> out(samples.size());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out[i].latent = tokenizer.tokenize(samples[i].motion).quantized;
        out[i].features = samples[i].features;
    }
    return out;
}

std::vector<MaskExample> prepare_mask_examples(const MotionTokenizer& tokenizer, const MotionAudioModel& mam,
                                               std::span<const SynthSample> samples) {
    std::vector<MaskExample> out(samples.size());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const LatentTokenGrid grid = tokenizer.tokenize(samples[i].motion);
        out[i].latent = grid.quantized;
        out[i].targets = grid.indices[0];
        out[i].speech = mam.speech_embedding(samples[i].features, grid.quantized.rows());
        out[i].labels = samples[i].labels;
    }
    return out;
}

std::size_t window_frames(const ModelStack& stack) { return stack.mam.config().queries * kDownscale; }

Generation generate_from_seed(const ModelStack& stack, const SpeechFeatures& features, const MotionSequence& seed,
                              std::size_t target_frames, std::size_t steps) {
    if (seed.frames.rows() != kSeedFrames) {
        throw DimensionError("infer: seed must have exactly " + std::to_string(kSeedFrames) + " frames, got " +
                             std::to_string(seed.frames.rows()));
    }
    if (seed.frames.cols() != stack.tokenizer.layout().channels()) {
        throw ConfigError("infer: seed has " + std::to_string(seed.frames.cols()) + " channels, model expects " +
                          std::to_string(stack.tokenizer.layout().channels()));
    }
    if (target_frames < kSeedFrames) {
        throw ConfigError("infer: target length must be at least " + std::to_string(kSeedFrames) + " frames");
    }
    if (target_frames > window_frames(stack)) {
        throw ConfigError("infer: target length " + std::to_string(target_frames) + " exceeds one window of " +
                          std::to_string(window_frames(stack)) + " frames; use infer_long");
    }
    features.validate();
    const std::size_t t_lat = latent_frames(target_frames);
    const Tensor speech = stack.mam.speech_embedding(features, t_lat);
    Tensor known(t_lat, stack.tokenizer.config().dim);
    const Tensor seed_latent = stack.tokenizer.tokenize(seed).quantized;
    std::copy(seed_latent.flat().begin(), seed_latent.flat().end(), known.row(0).begin());
    std::vector<bool> masked(t_lat, true);
    masked[0] = false;

    Generation g;
    g.completion = complete(stack.mask, stack.mask.params(), stack.tokenizer.codebook(), known, masked, speech, steps);
    g.motion = stack.tokenizer.decode_latent(g.completion.latent, target_frames);
    g.motion.fps = seed.fps;
    // The decoder does not reproduce the seed exactly, so shift the generated frames by
    // the residual at the last seed frame and fade the shift out over kSeamFrames.
    const std::size_t channels = seed.frames.cols();
    std::vector<double> residual(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        residual[c] = seed.frames(kSeedFrames - 1, c) - g.motion.frames(kSeedFrames - 1, c);
    }
    for (std::size_t t = kSeedFrames; t < target_frames && t < kSeedFrames - 1 + kSeamFrames; ++t) {
        const double w = 1.0 - static_cast<double>(t - (kSeedFrames - 1)) / static_cast<double>(kSeamFrames);
        for (std::size_t c = 0; c < channels; ++c) {
            g.motion.frames(t, c) += w * residual[c];
        }
    }
    for (std::size_t t = 0; t < kSeedFrames; ++t) {
        std::copy(seed.frames.row(t).begin(), seed.frames.row(t).end(), g.motion.frames.row(t).begin());
    }
    return g;
}

MotionSequence infer(const ModelStack& stack, const SpeechFeatures& features, const MotionSequence& seed,
                     std::size_t target_frames, std::size_t steps) {
    return generate_from_seed(stack, features, seed, target_frames, steps).motion;
}

std::vector<std::size_t> window_junctions(const ModelStack& stack, std::size_t target_frames) {
    const std::size_t window = window_frames(stack);
    std::vector<std::size_t> out;
    std::size_t pos = std::min(window, target_frames);
    while (pos < target_frames) {
        out.push_back(pos);
        const std::size_t start = pos - kSeedFrames;
        pos = start + std::min(window, target_frames - start);
    }
    return out;
}

MotionSequence infer_long(const ModelStack& stack, const SpeechFeatures& features, const MotionSequence& seed,
                          std::size_t target_frames, std::size_t steps) {
    if (features.frames() != target_frames) {
        throw DimensionError("infer_long: features cover " + std::to_string(features.frames()) +
                             " frames, target is " + std::to_string(target_frames));
    }
    const std::size_t window = window_frames(stack);
    auto slice = [&](std::size_t start, std::size_t count) {
        return SpeechFeatures{features.low.slice_rows(start, count), features.high.slice_rows(start, count)};
    };
    const std::size_t first = std::min(window, target_frames);
    MotionSequence out = infer(stack, slice(0, first), seed, first, steps);
    Tensor frames(target_frames, out.frames.cols());
    std::copy(out.frames.flat().begin(), out.frames.flat().end(), frames.flat().begin());
    std::size_t pos = first;
    while (pos < target_frames) {
        const std::size_t start = pos - kSeedFrames;
        const std::size_t count = std::min(window, target_frames - start);
        MotionSequence next_seed = out;
        next_seed.frames = frames.slice_rows(start, kSeedFrames);
        const MotionSequence clip = infer(stack, slice(start, count), next_seed, count, steps);
        for (std::size_t t = kSeedFrames; t < count; ++t) {
            std::copy(clip.frames.row(t).begin(), clip.frames.row(t).end(), frames.row(start + t).begin());
        }
        pos = start + count;
    }
    out.frames = std::move(frames);
    return out;
}

// ---------------------------------------------------------------------------

std::vector<double> audio_beats(const SynthSample& sample, double fps) {
    std::vector<double> beats;
    for (const auto& e : sample.events) {
        beats.push_back(static_cast<double>(e.onset) / fps);
    }
    return beats;
}

Evaluation evaluate(const ModelStack& stack, std::span<const SynthSample> samples, const PipelineConfig& config) {
    if (samples.size() < 2) {
        throw ConfigError("evaluate: need at least 2 clips");
    }
    const std::size_t n = samples.size();
    Evaluation ev;
    ev.generated.resize(n);
    std::vector<double> hits(n, 0.0), counted(n, 0.0), bc(n, 0.0), mse(n, 0.0), lvd_values(n, 0.0);
    std::vector<double> event_sum(n, 0.0), event_count(n, 0.0), idle_sum(n, 0.0), idle_count(n, 0.0);
    std::vector<char> has_beats(n, 0);

#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < n; ++i) {
        const SynthSample& s = samples[i];
        MotionSequence seed = s.motion;
        seed.frames = s.motion.frames.slice_rows(0, kSeedFrames);
        const Generation g = generate_from_seed(stack, s.features, seed, s.motion.frames.rows(), config.steps);
        const LatentTokenGrid truth = stack.tokenizer.tokenize(s.motion);
        for (std::size_t t = 1; t < truth.indices[0].size(); ++t) {
            hits[i] += g.completion.base_codes[t] == truth.indices[0][t] ? 1.0 : 0.0;
            counted[i] += 1.0;
        }
        const std::vector<double> beats = audio_beats(s, s.motion.fps);
        if (!beats.empty()) {
            has_beats[i] = 1;
            bc[i] = beat_consistency(g.motion, beats, config.bc_sigma);
        }
        mse[i] = vertex_mse(g.motion, s.motion);
        lvd_values[i] = lvd(g.motion, s.motion);

        const Tensor speech = stack.mam.speech_embedding(s.features, truth.quantized.rows());
        const AttentionMap map = stack.mask.attention(stack.teacher, truth.quantized, speech);
        for (std::size_t t = 0; t < map.scores.size(); ++t) {
            if (s.labels[t] > 0.0) {
                event_sum[i] += map.scores[t];
                event_count[i] += 1.0;
            } else {
                idle_sum[i] += map.scores[t];
                idle_count[i] += 1.0;
            }
        }
        ev.generated[i] = g.motion;
    }

    auto total = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) {
            acc += x;
        }
        return acc;
    };
    double bc_total = 0.0;
    std::size_t bc_clips = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (has_beats[i]) {
            bc_total += bc[i];
            ++bc_clips;
        }
    }
    std::vector<MotionSequence> reference;
    reference.reserve(n);
    for (const auto& s : samples) {
        reference.push_back(s.motion);
    }

    MetricReport& r = ev.report;
    r.strategy = strategy_name(config.strategy);
    r.generated = n;
    r.reference = n;
    r.token_accuracy = total(counted) > 0.0 ? total(hits) / total(counted) : 0.0;
    r.fgd = toy_fgd(stack.tokenizer, ev.generated, reference);
    r.bc = bc_clips > 0 ? bc_total / static_cast<double>(bc_clips) : 0.0;
    r.div = diversity(ev.generated);
    r.mse = total(mse) / static_cast<double>(n);
    r.lvd = total(lvd_values) / static_cast<double>(n);
    r.config_echo = config.to_text();
    ev.event_score = total(event_count) > 0.0 ? total(event_sum) / total(event_count) : 0.0;
    ev.idle_score = total(idle_count) > 0.0 ? total(idle_sum) / total(idle_count) : 0.0;
    if (bc_clips == 0) {
        spdlog::warn("evaluate: no clip has gesture events, bc is 0");
    }
    return ev;
}

std::vector<SynthSample> train_corpus(const PipelineConfig& config) {
    return generate(config.synth, Rng(config.seed).split("train"));
}

std::vector<SynthSample> eval_corpus(const PipelineConfig& config) {
    SynthConfig synth = config.synth;
    synth.num_sequences = config.eval_sequences;
    return generate(synth, Rng(config.seed).split("eval"));
}

std::string ablation_table(const std::vector<Evaluation>& evaluations) {
    std::string out = "strategy       fgd       bc        div       accuracy  event     idle\n";
    char line[160];
    for (const Evaluation& e : evaluations) {
        const MetricReport& r = e.report;
        std::snprintf(line, sizeof line, "%-14s %-9.5f %-9.5f %-9.5f %-9.5f %-9.4f %.4f\n", r.strategy.c_str(), r.fgd,
                      r.bc, r.div, r.token_accuracy, e.event_score, e.idle_score);
        out += line;
    }
    return out;
}

void set_log_level(const std::string& level) {
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "warn") {
        spdlog::set_level(spdlog::level::warn);
    } else if (level == "info") {
        spdlog::set_level(spdlog::level::info);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        throw ConfigError("EM_LOG: unknown level '" + level + "' (error|warn|info|debug)");
    }
}

void set_log_level_from_env(const std::string& fallback) {
    const char* env = std::getenv("EM_LOG");
    set_log_level(env != nullptr && *env != '\0' ? std::string(env) : fallback);
}

} // namespace motionmask
