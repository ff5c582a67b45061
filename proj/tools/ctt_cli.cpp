// ctt: streaming transducer speech recognition at desk scale.
//
// Subcommands: train-toy, decode, stream, latency-report, loss-check.
// Exit codes: 0 success, 1 verification/run failure, 2 usage or config error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ctt/config.hpp"
#include "ctt/decoder.hpp"
#include "ctt/encoder.hpp"
#include "ctt/frontend.hpp"
#include "ctt/loss.hpp"
#include "ctt/model.hpp"
#include "ctt/trainer.hpp"

namespace fs = std::filesystem;
using ctt::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct CommonArgs {
    std::string config_path;
    std::string preset;
    bool json_out = false;
    std::string manifest_path;
};

ctt::ModelConfig resolve_config(const CommonArgs& args, const std::string& fallback_preset) {
    if (!args.config_path.empty() && !args.preset.empty()) {
        throw CLI::ValidationError("pass either --config or --preset, not both");
    }
    if (!args.config_path.empty()) return ctt::load_config(args.config_path);
    const std::string name = args.preset.empty() ? fallback_preset : args.preset;
    ctt::ModelConfig cfg = ctt::preset_config(name);
    cfg.validate();
    return cfg;
}

json make_manifest(const std::string& command, const std::vector<std::string>& argv,
                   const ctt::ModelConfig& cfg, std::uint64_t seed,
                   const json& extra = json::object()) {
    json m;
    m["tool"] = "ctt";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["args"] = argv;
    m["seed"] = seed;
    m["config"] = cfg;
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    return m;
}

void maybe_write_manifest(const json& manifest, const std::string& path) {
    if (path.empty()) return;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest: " + path);
    os << manifest.dump(2) << "\n";
}

std::vector<std::string> collect_argv(int argc, char** argv) {
    std::vector<std::string> out;
    for (int i = 0; i < argc; ++i) out.emplace_back(argv[i]);
    return out;
}

// ---------------------------------------------------------------------------
// latency-report
// ---------------------------------------------------------------------------

int run_latency_report(const CommonArgs& args, const std::vector<std::string>& argv) {
    const ctt::ModelConfig cfg = resolve_config(args, "default-2-2-8");
    const auto rows = ctt::latency_table(cfg.encoder);
    const auto la = ctt::lookahead(cfg.encoder);

    if (args.json_out) {
        json j;
        j["rows"] = json::array();
        for (const auto& r : rows) {
            j["rows"].push_back({{"layer", r.name},
                                 {"input_rate_ms", r.input_rate_ms},
                                 {"output_rate_ms", r.output_rate_ms},
                                 {"left_ctx", r.left_ctx},
                                 {"right_ctx", r.right_ctx},
                                 {"left_ms", r.left_ms},
                                 {"right_ms", r.right_ms},
                                 {"cum_lookahead_frames", r.cum_lookahead_frames},
                                 {"cum_lookahead_ms", r.cum_lookahead_ms},
                                 {"cache_doubles", r.cache_doubles}});
        }
        j["total_lookahead_ms"] = la.ms;
        j["total_lookahead_input_frames"] = la.input_frames;
        j["output_frame_ms"] = double(cfg.encoder.downsample_factor()) *
                               cfg.encoder.input_hop_ms;
        j["manifest"] = make_manifest("latency-report", argv, cfg, 0);
        std::cout << j.dump(2) << "\n";
    } else {
        std::printf("%-24s %9s %9s %13s %13s %15s %13s\n", "layer", "rate(ms)", "out(ms)",
                    "left", "right", "look-ahead(ms)", "cache(f64)");
        for (const auto& r : rows) {
            char left[32], right[32], cache[32];
            std::snprintf(left, sizeof(left), "%ldf/%.0fms", r.left_ctx, r.left_ms);
            std::snprintf(right, sizeof(right), "%ldf/%.0fms", r.right_ctx, r.right_ms);
            if (r.cache_doubles < 0) {
                std::snprintf(cache, sizeof(cache), "unbounded");
            } else {
                std::snprintf(cache, sizeof(cache), "%ld", r.cache_doubles);
            }
            std::printf("%-24s %9.0f %9.0f %13s %13s %15.0f %13s\n", r.name.c_str(),
                        r.input_rate_ms, r.output_rate_ms, left, right, r.cum_lookahead_ms,
                        cache);
        }
        std::printf("total look-ahead: %.0f ms (%ld input frames)\n", la.ms,
                    la.input_frames);
    }
    maybe_write_manifest(make_manifest("latency-report", argv, cfg, 0), args.manifest_path);
    return 0;
}

// ---------------------------------------------------------------------------
// loss-check
// ---------------------------------------------------------------------------

int run_loss_check(long trials, std::uint64_t seed, bool json_out,
                   const std::string& manifest_path,
                   const std::vector<std::string>& argv) {
    const auto rep = ctt::run_loss_checks(trials, seed);
    if (json_out) {
        json j;
        j["trials"] = rep.trials;
        j["fb_vs_brute_max"] = rep.fb_vs_brute_max;
        j["closed_form_max"] = rep.closed_form_max;
        j["grad_fd_max_rel"] = rep.grad_fd_max_rel;
        j["mass_max_err"] = rep.mass_max_err;
        j["pass"] = rep.pass;
        std::cout << j.dump(2) << "\n";
    } else {
        std::printf("loss-check: %ld random lattices, seed %llu\n", rep.trials,
                    (unsigned long long)seed);
        std::fputs(rep.to_string().c_str(), stdout);
    }
    json manifest;
    manifest["tool"] = "ctt";
    manifest["version"] = kToolVersion;
    manifest["command"] = "loss-check";
    manifest["args"] = argv;
    manifest["seed"] = seed;
    manifest["trials"] = trials;
    maybe_write_manifest(manifest, manifest_path);
    return rep.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

int run_train_toy(const CommonArgs& args, const std::string& out_dir, long steps_override,
                  std::uint64_t seed_override, bool have_seed, int n_utts,
                  const std::vector<std::string>& argv) {
    ctt::ModelConfig cfg = resolve_config(args, "toy");
    if (steps_override >= 0) cfg.train.steps = steps_override;
    if (have_seed) cfg.train.seed = seed_override;

    ctt::Vocab vocab = ctt::toy_vocab();
    ctt::Model model(cfg, vocab, cfg.train.seed * 31 + 7);
    ctt::Rng data_rng(cfg.train.seed);
    const auto data = ctt::make_toy_dataset(vocab, n_utts, 3, 6, cfg.frontend, data_rng);

    std::printf("train-toy: %d synthetic utterances, %ld trainable parameters, %ld steps\n",
                n_utts, model.n_trainable_params(), cfg.train.steps);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = ctt::train_toy(model, data, cfg.train, &std::cout);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (result.diverged) {
        std::fprintf(stderr, "train-toy: diverged (non-finite loss) after %ld steps\n",
                     result.steps_run);
        return 1;
    }

    const double mean_nll =
        result.steps_run > 0 ? ctt::dataset_mean_nll(model, data) : 0.0;
    int exact = 0;
    std::vector<std::string> decoded;
    for (const auto& utt : data) {
        ctt::AcousticFrames f = ctt::logmel(utt.samples, cfg.frontend);
        const auto hyp = ctt::decode_offline(model, f, 1, cfg.decode.max_symbols_per_frame);
        decoded.push_back(vocab.decode(hyp.labels));
        if (decoded.back() == utt.text) ++exact;
    }
    std::printf("train-toy: ran %ld steps in %.1f s, dataset mean nll %.4f, "
                "greedy exact %d/%d\n",
                result.steps_run, secs, mean_nll, exact, n_utts);

    fs::create_directories(out_dir);
    ctt::save_config(cfg, (fs::path(out_dir) / "config.json").string());
    vocab.save((fs::path(out_dir) / "vocab.txt").string());
    model.save((fs::path(out_dir) / "checkpoint.ckpt").string());
    {
        json curve;
        curve["loss"] = result.loss_curve;
        curve["steps_run"] = result.steps_run;
        curve["mean_nll"] = mean_nll;
        curve["exact_transcripts"] = exact;
        std::ofstream os(fs::path(out_dir) / "loss_curve.json");
        os << curve.dump(2) << "\n";
    }
    json manifest = make_manifest("train-toy", argv, cfg, cfg.train.seed,
                                  {{"out_dir", out_dir},
                                   {"utterances", n_utts},
                                   {"steps_run", result.steps_run}});
    maybe_write_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    if (!args.manifest_path.empty()) maybe_write_manifest(manifest, args.manifest_path);
    std::printf("train-toy: wrote %s/{config.json, vocab.txt, checkpoint.ckpt, "
                "loss_curve.json, manifest.json}\n",
                out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// decode / stream
// ---------------------------------------------------------------------------

ctt::Model load_model(const ctt::ModelConfig& cfg, const std::string& checkpoint,
                      const std::string& vocab_path) {
    ctt::Vocab vocab = ctt::Vocab::load(vocab_path);
    ctt::Model model(cfg, vocab, 0);
    model.load(checkpoint);
    return model;
}

int run_decode(const CommonArgs& args, const std::string& wav_path,
               const std::string& checkpoint, const std::string& vocab_path, int beam,
               const std::vector<std::string>& argv) {
    const ctt::ModelConfig cfg = resolve_config(args, "toy");
    ctt::Model model = load_model(cfg, checkpoint, vocab_path);
    const ctt::Waveform wav = ctt::read_wav(wav_path);
    const ctt::AcousticFrames frames = ctt::logmel(wav, cfg.frontend);
    const int width = beam > 0 ? beam : cfg.decode.beam_width;
    const auto hyps =
        ctt::decode_offline_nbest(model, frames, width, cfg.decode.max_symbols_per_frame);
    const auto& hyp = hyps.front();
    const std::string text = model.vocab.decode(hyp.labels);
    if (args.json_out) {
        json j;
        j["transcript"] = text;
        j["score"] = hyp.score;
        j["labels"] = hyp.labels;
        j["nbest"] = json::array();
        for (const auto& h : hyps) {
            j["nbest"].push_back(
                {{"transcript", model.vocab.decode(h.labels)}, {"score", h.score}});
        }
        j["frames"] = frames.n_frames;
        j["encoder_frames"] = ctt::output_length(frames.n_frames, cfg.encoder);
        j["manifest"] = make_manifest("decode", argv, cfg, 0,
                                      {{"wav", wav_path}, {"checkpoint", checkpoint}});
        std::cout << j.dump(2) << "\n";
    } else {
        std::printf("%s\n", text.c_str());
    }
    maybe_write_manifest(make_manifest("decode", argv, cfg, 0,
                                       {{"wav", wav_path}, {"checkpoint", checkpoint}}),
                         args.manifest_path);
    return 0;
}

int run_stream(const CommonArgs& args, const std::string& wav_path,
               const std::string& checkpoint, const std::string& vocab_path, int beam,
               int chunk_ms, const std::vector<std::string>& argv) {
    const ctt::ModelConfig cfg = resolve_config(args, "toy");
    ctt::Model model = load_model(cfg, checkpoint, vocab_path);
    const ctt::Waveform wav = ctt::read_wav(wav_path);
    const int width = beam > 0 ? beam : 1;
    const double frame_ms =
        double(cfg.encoder.downsample_factor()) * cfg.encoder.input_hop_ms;

    ctt::StreamingFeaturizer featurizer(cfg.frontend);
    ctt::DecodeSession session(model, width, cfg.decode.max_symbols_per_frame);
    const size_t chunk_samples =
        size_t(std::max(1, chunk_ms)) * size_t(cfg.frontend.sample_rate) / 1000;

    json events = json::array();
    std::string last_partial;
    size_t pos = 0;
    double decode_seconds = 0.0;
    while (pos < wav.samples.size()) {
        const size_t n = std::min(chunk_samples, wav.samples.size() - pos);
        const bool last = pos + n >= wav.samples.size();
        ctt::AcousticFrames feats = featurizer.push(std::vector<double>(
            wav.samples.begin() + long(pos), wav.samples.begin() + long(pos + n)));
        const auto step_start = std::chrono::steady_clock::now();
        const long emitted = session.push(feats, last);
        decode_seconds +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - step_start)
                .count();
        pos += n;
        if (emitted > 0) {
            const std::string partial = session.transcript();
            if (partial != last_partial || session.best_rewritten()) {
                const double t_sec = double(session.frames_decoded()) * frame_ms / 1000.0;
                if (args.json_out) {
                    events.push_back({{"t_sec", t_sec},
                                      {"encoder_frame", session.frames_decoded()},
                                      {"partial", partial},
                                      {"rewritten", session.best_rewritten()}});
                } else {
                    std::printf("[%6.2fs frame %4ld] partial: %s%s\n", t_sec,
                                session.frames_decoded(), partial.c_str(),
                                session.best_rewritten() ? "  (rewritten)" : "");
                }
                last_partial = partial;
            }
        }
    }
    const std::string final_text = session.transcript();
    const double audio_seconds = double(wav.samples.size()) / cfg.frontend.sample_rate;
    const double ms_per_frame = session.frames_decoded() > 0
                                    ? 1000.0 * decode_seconds / session.frames_decoded()
                                    : 0.0;
    if (args.json_out) {
        json j;
        j["events"] = events;
        j["transcript"] = final_text;
        j["score"] = session.best().score;
        j["encoder_frames"] = session.frames_decoded();
        j["decode_seconds"] = decode_seconds;
        j["audio_seconds"] = audio_seconds;
        j["ms_per_encoder_frame"] = ms_per_frame;
        j["manifest"] = make_manifest("stream", argv, cfg, 0,
                                      {{"wav", wav_path},
                                       {"checkpoint", checkpoint},
                                       {"chunk_ms", chunk_ms}});
        std::cout << j.dump(2) << "\n";
    } else {
        std::printf("final: %s\n", final_text.c_str());
        std::printf("timing: %.2f s audio, %.2f s encode+decode (%.2f ms/encoder frame, "
                    "rtf %.3f)\n",
                    audio_seconds, decode_seconds, ms_per_frame,
                    audio_seconds > 0 ? decode_seconds / audio_seconds : 0.0);
    }
    maybe_write_manifest(make_manifest("stream", argv, cfg, 0,
                                       {{"wav", wav_path}, {"checkpoint", checkpoint}}),
                         args.manifest_path);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streaming transducer speech recognition (desk scale)"};
    app.require_subcommand(1);
    const auto argv_copy = collect_argv(argc, argv);

    CommonArgs common;

    auto* latency = app.add_subcommand("latency-report",
                                       "per-layer receptive field, frame rate and "
                                       "look-ahead accounting");
    latency->add_option("--config", common.config_path, "model config JSON");
    latency->add_option("--preset", common.preset, "named preset");
    latency->add_flag("--json", common.json_out, "machine-readable output");
    latency->add_option("--manifest", common.manifest_path, "write run manifest here");

    long lc_trials = 200;
    std::uint64_t lc_seed = 1;
    auto* loss_check = app.add_subcommand(
        "loss-check", "loss oracle equivalence and gradient sweeps (exit 0 iff all pass)");
    loss_check->add_option("--trials", lc_trials, "number of random lattices")
        ->check(CLI::PositiveNumber);
    loss_check->add_option("--seed", lc_seed, "sweep seed");
    loss_check->add_flag("--json", common.json_out, "machine-readable output");
    loss_check->add_option("--manifest", common.manifest_path, "write run manifest here");

    std::string out_dir = "toy-run";
    long steps_override = -1;
    std::uint64_t seed_override = 0;
    int n_utts = 20;
    auto* train = app.add_subcommand("train-toy",
                                     "overfit a small model on synthetic tone-coded "
                                     "utterances and write a checkpoint");
    train->add_option("--config", common.config_path, "model config JSON");
    train->add_option("--preset", common.preset, "named preset (default: toy)");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--steps", steps_override, "optimizer steps");
    auto* seed_opt = train->add_option("--seed", seed_override, "training seed");
    train->add_option("--utterances", n_utts, "dataset size")->check(CLI::PositiveNumber);
    train->add_option("--manifest", common.manifest_path, "extra manifest copy");

    std::string wav_path, checkpoint_path, vocab_path;
    int beam = 0;
    auto* decode = app.add_subcommand("decode", "transcribe a 16 kHz mono wav file");
    decode->add_option("wav", wav_path, "input wav")->required();
    decode->add_option("--config", common.config_path, "model config JSON");
    decode->add_option("--preset", common.preset, "named preset");
    decode->add_option("--checkpoint", checkpoint_path, "parameter checkpoint")->required();
    decode->add_option("--vocab", vocab_path, "vocabulary file")->required();
    decode->add_option("--beam", beam, "beam width (default from config)");
    decode->add_flag("--json", common.json_out, "machine-readable output");
    decode->add_option("--manifest", common.manifest_path, "write run manifest here");

    int chunk_ms = 100;
    auto* stream = app.add_subcommand("stream",
                                      "transcribe incrementally in fixed-size chunks, "
                                      "printing partial results with timestamps");
    stream->add_option("wav", wav_path, "input wav")->required();
    stream->add_option("--config", common.config_path, "model config JSON");
    stream->add_option("--preset", common.preset, "named preset");
    stream->add_option("--checkpoint", checkpoint_path, "parameter checkpoint")->required();
    stream->add_option("--vocab", vocab_path, "vocabulary file")->required();
    stream->add_option("--beam", beam, "beam width (default: greedy)");
    stream->add_option("--chunk-ms", chunk_ms, "audio chunk size in ms")
        ->check(CLI::PositiveNumber);
    stream->add_flag("--json", common.json_out, "machine-readable output");
    stream->add_option("--manifest", common.manifest_path, "write run manifest here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (latency->parsed()) return run_latency_report(common, argv_copy);
        if (loss_check->parsed()) {
            return run_loss_check(lc_trials, lc_seed, common.json_out,
                                  common.manifest_path, argv_copy);
        }
        if (train->parsed()) {
            return run_train_toy(common, out_dir, steps_override, seed_override,
                                 seed_opt->count() > 0, n_utts, argv_copy);
        }
        if (decode->parsed()) {
            return run_decode(common, wav_path, checkpoint_path, vocab_path, beam,
                              argv_copy);
        }
        if (stream->parsed()) {
            return run_stream(common, wav_path, checkpoint_path, vocab_path, beam,
                              chunk_ms, argv_copy);
        }
    } catch (const CLI::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
