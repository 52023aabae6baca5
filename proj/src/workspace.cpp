#include "motionmask/workspace.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <sstream>

#include <spdlog/spdlog.h>

#include "motionmask/errors.hpp"

namespace motionmask {

namespace fs = std::filesystem;

namespace {

std::string shortest(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <typename T>
T parse_field(const std::string& text, const std::string& what) {
    T v{};
    const char* end = text.data() + text.size();
    const auto res = std::from_chars(text.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw FormatError(what + ": cannot parse '" + text + "'");
    }
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream in(s);
    while (std::getline(in, item, sep)) {
        out.push_back(item);
    }
    if (!s.empty() && s.back() == sep) {
        out.emplace_back();
    }
    return out;
}

PipelineConfig echo_config(const Checkpoint& c) { return parse_config(c.config, PipelineConfig{}); }

void require_stage(const Checkpoint& c, const std::string& stage) {
    if (c.stage != stage) {
        throw FormatError("checkpoint holds stage '" + c.stage + "', expected '" + stage + "'");
    }
}

Checkpoint load_upstream(const std::string& path, const std::string& producing_stage, const std::string& flags = "") {
    if (!fs::exists(path)) {
        throw StageError(producing_stage, path + " not found; run " + producing_stage + flags + " first");
    }
    return load_checkpoint(path);
}

std::string curve_csv(const std::string& header, const std::vector<std::vector<double>>& columns) {
    std::string out = "step," + header + "\n";
    const std::size_t n = columns.empty() ? 0 : columns.front().size();
    for (std::size_t i = 0; i < n; ++i) {
        out += std::to_string(i + 1);
        for (const auto& c : columns) {
            out += "," + shortest(c[i]);
        }
        out += "\n";
    }
    return out;
}

const std::vector<std::string> kCorpusKeys = {"synth."};
const std::vector<std::string> kRvqKeys = {"synth.", "rvq."};
const std::vector<std::string> kMamKeys = {"synth.", "rvq.", "mam."};
const std::vector<std::string> kMaskKeys = {"synth.", "rvq.", "mam.", "mask."};

} // namespace

std::string Workspace::path(const std::string& name) const { return (fs::path(root) / name).string(); }

Tensor pack_features(const SpeechFeatures& f) {
    f.validate();
    Tensor out(f.frames(), f.low.cols() + f.high.cols());
    for (std::size_t t = 0; t < f.frames(); ++t) {
        for (std::size_t c = 0; c < f.low.cols(); ++c) {
            out(t, c) = f.low(t, c);
        }
        for (std::size_t c = 0; c < f.high.cols(); ++c) {
            out(t, f.low.cols() + c) = f.high(t, c);
        }
    }
    return out;
}

SpeechFeatures unpack_features(const Tensor& packed, std::size_t low_channels) {
    if (packed.cols() <= low_channels) {
        throw DimensionError("features: " + std::to_string(packed.cols()) + " columns, need more than " +
                             std::to_string(low_channels) + " low channels");
    }
    SpeechFeatures f{packed.slice_cols(0, low_channels),
                     packed.slice_cols(low_channels, packed.cols() - low_channels)};
    f.validate();
    return f;
}

std::string events_text(const std::vector<GestureEvent>& events) {
    std::string out;
    for (const auto& e : events) {
        if (!out.empty()) {
            out += ';';
        }
        out += std::to_string(e.onset) + ":" + std::to_string(e.duration) + ":" + part_name(e.part) + ":" +
               shortest(e.amplitude) + ":" + std::to_string(e.shape);
    }
    return out;
}

std::vector<GestureEvent> parse_events(const std::string& text) {
    std::vector<GestureEvent> out;
    if (text.empty()) {
        return out;
    }
    for (const auto& item : split(text, ';')) {
        const auto f = split(item, ':');
        if (f.size() != 5) {
            throw FormatError("event '" + item + "': expected onset:duration:part:amplitude:shape");
        }
        GestureEvent e;
        e.onset = parse_field<std::size_t>(f[0], "event onset");
        e.duration = parse_field<std::size_t>(f[1], "event duration");
        e.part = part_from_name(f[2]);
        e.amplitude = parse_field<double>(f[3], "event amplitude");
        e.shape = parse_field<std::size_t>(f[4], "event shape");
        out.push_back(e);
    }
    return out;
}

void save_corpus(const std::string& dir, const std::vector<SynthSample>& samples, const PipelineConfig& config) {
    std::string manifest = "id,seed,frames,events\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const SynthSample& s = samples[i];
        const std::string id = std::to_string(i);
        write_tensor_file((fs::path(dir) / (id + ".motion.emtf")).string(), s.motion.frames);
        write_tensor_file((fs::path(dir) / (id + ".features.emtf")).string(), pack_features(s.features));
        manifest += id + "," + std::to_string(s.seed) + "," + std::to_string(s.motion.frames.rows()) + "," +
                    events_text(s.events) + "\n";
    }
    write_file((fs::path(dir) / "config.txt").string(), config.to_text());
    // Written last: its presence marks a complete corpus.
    write_file((fs::path(dir) / "manifest.csv").string(), manifest);
}

std::vector<SynthSample> load_corpus(const std::string& dir, const PipelineConfig& config) {
    const fs::path manifest = fs::path(dir) / "manifest.csv";
    if (!fs::exists(manifest)) {
        throw StageError("gen-data", manifest.string() + " not found; run gen-data first");
    }
    Checkpoint echo;
    echo.stage = "corpus";
    echo.config = read_file((fs::path(dir) / "config.txt").string());
    require_compatible(config, echo, kCorpusKeys);

    std::istringstream in(read_file(manifest.string()));
    std::string line;
    std::getline(in, line);
    if (line != "id,seed,frames,events") {
        throw FormatError(manifest.string() + ": unexpected header");
    }
    std::vector<SynthSample> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split(line, ',');
        if (f.size() != 4) {
            throw FormatError(manifest.string() + ": bad row '" + line + "'");
        }
        SynthSample s;
        s.seed = parse_field<std::uint64_t>(f[1], "manifest seed");
        s.events = parse_events(f[3]);
        s.motion.layout = config.synth.layout;
        s.motion.fps = config.synth.fps;
        s.motion.frames = read_tensor_file((fs::path(dir) / (f[0] + ".motion.emtf")).string());
        s.motion.validate();
        s.features = unpack_features(read_tensor_file((fs::path(dir) / (f[0] + ".features.emtf")).string()),
                                     config.synth.low_channels());
        if (s.motion.frames.rows() != parse_field<std::size_t>(f[2], "manifest frames") ||
            s.features.frames() != s.motion.frames.rows()) {
            throw FormatError(manifest.string() + ": sample " + f[0] + " has inconsistent frame counts");
        }
        s.labels = event_labels(s.events, s.motion.frames.rows());
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------

Checkpoint tokenizer_checkpoint(const MotionTokenizer& tokenizer, const PipelineConfig& config, RngState rng) {
    Checkpoint c;
    c.stage = "rvq";
    c.config = config.to_text();
    c.rng = rng;
    add_params(c, tokenizer.params(), "param/");
    for (std::size_t l = 0; l < tokenizer.codebook().layer_count(); ++l) {
        c.tensors.emplace_back("codebook/" + std::to_string(l), tokenizer.codebook().layers[l]);
    }
    return c;
}

Checkpoint mam_checkpoint(const MotionAudioModel& mam, const PipelineConfig& config, RngState rng) {
    Checkpoint c;
    c.stage = "mam";
    c.config = config.to_text();
    c.rng = rng;
    add_params(c, mam.params(), "param/");
    return c;
}

Checkpoint mask_checkpoint(const MaskTransformer& model, const ParamSet& teacher, const PipelineConfig& config,
                           RngState rng) {
    Checkpoint c;
    c.stage = "mask";
    c.config = config.to_text();
    c.rng = rng;
    c.tensors.emplace_back("base_codes", model.base_codes());
    add_params(c, model.params(), "student/");
    add_params(c, teacher, "teacher/");
    return c;
}

MotionTokenizer tokenizer_from(const Checkpoint& c) {
    require_stage(c, "rvq");
    const PipelineConfig config = echo_config(c);
    MotionTokenizer tokenizer(config.rvq, config.synth.layout, Rng(0));
    tokenizer.set_fps(config.synth.fps);
    restore_params(c, tokenizer.params(), "param/");
    Codebook& cb = tokenizer.codebook();
    for (std::size_t l = 0; l < cb.layer_count(); ++l) {
        const Tensor& t = c.tensor("codebook/" + std::to_string(l));
        if (t.rows() != cb.layers[l].rows() || t.cols() != cb.layers[l].cols()) {
            throw FormatError("rvq checkpoint: codebook layer " + std::to_string(l) + " has shape " +
                              t.shape_string());
        }
        cb.layers[l] = t;
    }
    return tokenizer;
}

MotionAudioModel mam_from(const Checkpoint& c) {
    require_stage(c, "mam");
    MotionAudioModel mam(echo_config(c).mam, Rng(0));
    restore_params(c, mam.params(), "param/");
    return mam;
}

MaskTransformer mask_from(const Checkpoint& c, ParamSet& teacher) {
    require_stage(c, "mask");
    MaskTransformer model(echo_config(c).mask, c.tensor("base_codes"), Rng(0));
    restore_params(c, model.params(), "student/");
    teacher = model.params().clone_values();
    restore_params(c, teacher, "teacher/");
    return model;
}

void require_compatible(const PipelineConfig& config, const Checkpoint& upstream,
                        const std::vector<std::string>& prefixes) {
    const auto current = config.to_map();
    const auto stored = echo_config(upstream).to_map();
    for (const auto& [key, value] : current) {
        for (const auto& prefix : prefixes) {
            if (key.rfind(prefix, 0) == 0 && stored.at(key) != value) {
                throw ConfigError("config key '" + key + "' is " + value + " but the " + upstream.stage +
                                  " stage was built with " + stored.at(key) + "; rerun that stage");
            }
        }
    }
}

ModelStack load_stack(const Workspace& work, const PipelineConfig& config, MaskStrategy strategy) {
    const Checkpoint rvq = load_upstream(work.rvq_checkpoint(), "train-rvq");
    require_compatible(config, rvq, kRvqKeys);
    const Checkpoint mam = load_upstream(work.mam_checkpoint(), "train-mam");
    require_compatible(config, mam, kMamKeys);
    const Checkpoint mask = load_upstream(work.mask_checkpoint(strategy), "train-mask",
                                           std::string(" --strategy ") + strategy_name(strategy));
    require_compatible(config, mask, kMaskKeys);
    ModelStack stack;
    stack.tokenizer = tokenizer_from(rvq);
    stack.mam = mam_from(mam);
    stack.mask = mask_from(mask, stack.teacher);
    const Tensor& base = stack.tokenizer.codebook().layers[0];
    if (!std::equal(base.flat().begin(), base.flat().end(), stack.mask.base_codes().flat().begin(),
                    stack.mask.base_codes().flat().end())) {
        throw StageError("train-mask", "mask checkpoint was trained against a different tokenizer; rerun train-mask");
    }
    return stack;
}

// ---------------------------------------------------------------------------

void run_gen_data(const PipelineConfig& config, const Workspace& work) {
    config.validate();
    const auto train = train_corpus(config);
    const auto eval = eval_corpus(config);
    save_corpus(work.corpus_dir("train"), train, config);
    save_corpus(work.corpus_dir("eval"), eval, config);
    write_file(work.path("config.txt"), config.to_text());
    spdlog::info("gen-data: {} train and {} eval sequences in {}", train.size(), eval.size(), work.root);
}

RvqTrainResult run_train_rvq(const PipelineConfig& config, const Workspace& work) {
    config.validate();
    const auto train = load_corpus(work.corpus_dir("train"), config);
    std::vector<MotionSequence> clips;
    clips.reserve(train.size());
    for (const auto& s : train) {
        clips.push_back(s.motion);
    }
    const Rng rng = Rng(config.seed).split("rvq");
    RvqTrainResult r = train_rvq(clips, config.rvq, config.synth.layout, rng);
    r.tokenizer.set_fps(config.synth.fps);
    save_checkpoint(work.rvq_checkpoint(), tokenizer_checkpoint(r.tokenizer, config, rng.state()));
    write_file(work.path("rvq.loss.csv"), curve_csv("loss,recon", {r.loss_curve, r.recon_curve}));
    spdlog::info("train-rvq: final recon {:.5f}, {} codes reseeded", r.recon_curve.back(), r.reseeded_codes);
    return r;
}

MamTrainResult run_train_mam(const PipelineConfig& config, const Workspace& work) {
    config.validate();
    const Checkpoint rvq = load_upstream(work.rvq_checkpoint(), "train-rvq");
    require_compatible(config, rvq, kRvqKeys);
    const auto train = load_corpus(work.corpus_dir("train"), config);
    const MotionTokenizer tokenizer = tokenizer_from(rvq);
    const Rng rng = Rng(config.seed).split("mam");
    MamTrainResult r = train_mam(prepare_mam_examples(tokenizer, train), config.mam, rng);
    save_checkpoint(work.mam_checkpoint(), mam_checkpoint(r.model, config, rng.state()));
    write_file(work.path("mam.loss.csv"), curve_csv("loss", {r.loss_curve}));
    spdlog::info("train-mam: positive cosine {:.3f} -> {:.3f}, frame retrieval {:.3f}", r.before.positive_cosine,
                 r.after.positive_cosine, r.after.frame_retrieval);
    return r;
}

MaskedTrainResult run_train_mask(const PipelineConfig& config, const Workspace& work) {
    config.validate();
    const Checkpoint rvq = load_upstream(work.rvq_checkpoint(), "train-rvq");
    require_compatible(config, rvq, kRvqKeys);
    const Checkpoint mam = load_upstream(work.mam_checkpoint(), "train-mam");
    require_compatible(config, mam, kMamKeys);
    const auto train = load_corpus(work.corpus_dir("train"), config);
    const MotionTokenizer tokenizer = tokenizer_from(rvq);
    const MotionAudioModel model = mam_from(mam);

    MaskedTrainOptions options;
    options.strategy = config.strategy;
    options.schedule = config.schedule;
    const Rng rng = Rng(config.seed).split("mask");
    const auto examples = prepare_mask_examples(tokenizer, model, train);
    MaskedTrainResult r = train_masked(examples, tokenizer.codebook().layers[0], config.mask, options, rng);
    save_checkpoint(work.mask_checkpoint(config.strategy), mask_checkpoint(r.model, r.teacher, config, rng.state()));
    write_file(work.path(std::string("mask.") + strategy_name(config.strategy) + ".loss.csv"),
               curve_csv("loss,ce,sem,l2", {r.loss_curve, r.ce_curve, r.sem_curve, r.l2_curve}));
    const MaskRatios& first = r.epoch_ratios.front();
    const MaskRatios& last = r.epoch_ratios.back();
    spdlog::info("train-mask ({}): ratios soft/hard/random {:.3f}/{:.3f}/{:.3f} -> {:.3f}/{:.3f}/{:.3f}",
                 strategy_name(config.strategy), first.soft, first.hard, first.random, last.soft, last.hard,
                 last.random);
    spdlog::info("train-mask ({}): ce {:.4f} -> {:.4f}, teacher distance {:.4f}", strategy_name(config.strategy),
                 r.ce_curve.front(), r.ce_curve.back(), r.teacher_distance.back());
    return r;
}

MotionSequence run_infer(const PipelineConfig& config, const Workspace& work, const InferRequest& request) {
    config.validate();
    if (request.out.empty()) {
        throw ConfigError("infer: --out is required");
    }
    const ModelStack stack = load_stack(work, config, config.strategy);
    const SpeechFeatures features = unpack_features(read_tensor_file(request.features), config.synth.low_channels());
    if (features.high.cols() != config.synth.high_channels()) {
        throw DimensionError("infer: feature file has " + std::to_string(features.high.cols()) +
                             " high channels, expected " + std::to_string(config.synth.high_channels()));
    }
    MotionSequence seed;
    seed.layout = config.synth.layout;
    seed.fps = config.synth.fps;
    seed.frames = read_tensor_file(request.seed);
    const std::size_t frames = request.frames == 0 ? features.frames() : request.frames;
    const MotionSequence motion = frames <= window_frames(stack)
                                      ? infer(stack, features, seed, frames, config.steps)
                                      : infer_long(stack, features, seed, frames, config.steps);
    write_tensor_file(request.out, motion.frames);
    return motion;
}

std::vector<Evaluation> run_eval(const PipelineConfig& config, const Workspace& work,
                                 const std::vector<MaskStrategy>& strategies, const std::string& out) {
    config.validate();
    if (strategies.empty()) {
        throw ConfigError("eval: no strategy given");
    }
    std::vector<ModelStack> stacks;
    for (MaskStrategy s : strategies) {
        stacks.push_back(load_stack(work, config, s));
    }
    const auto eval = load_corpus(work.corpus_dir("eval"), config);
    std::vector<Evaluation> results;
    std::string lines;
    for (std::size_t i = 0; i < strategies.size(); ++i) {
        PipelineConfig c = config;
        c.strategy = strategies[i];
        results.push_back(evaluate(stacks[i], eval, c));
        lines += results.back().report.to_json() + "\n";
    }
    if (!out.empty()) {
        write_file(out, lines);
    }
    return results;
}

AttentionMap run_export_attention(const PipelineConfig& config, const Workspace& work, std::size_t sample,
                                  const std::string& out) {
    config.validate();
    if (out.empty()) {
        throw ConfigError("export-attn: --out is required");
    }
    const ModelStack stack = load_stack(work, config, config.strategy);
    const auto eval = load_corpus(work.corpus_dir("eval"), config);
    if (sample >= eval.size()) {
        throw ConfigError("export-attn: sample " + std::to_string(sample) + " out of range (eval split has " +
                          std::to_string(eval.size()) + ")");
    }
    const SynthSample& s = eval[sample];
    const Tensor latent = stack.tokenizer.tokenize(s.motion).quantized;
    const Tensor speech = stack.mam.speech_embedding(s.features, latent.rows());
    const AttentionMap map = stack.mask.attention(stack.teacher, latent, speech);
    if (fs::path(out).has_parent_path()) {
        fs::create_directories(fs::path(out).parent_path());
    }
    export_attention(map, out);
    return map;
}

} // namespace motionmask
