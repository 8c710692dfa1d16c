#include "elat/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "elat/csv.hpp"
#include "elat/random.hpp"

namespace elat::cli {

namespace fs = std::filesystem;
using config::ConfigError;
using config::RunConfig;
using nlohmann::json;

namespace {

std::string epoch_name(const std::string& stem, std::size_t epoch, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%04zu", epoch);
    return stem + buf + ext;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

fs::path prepare(RunConfig& cfg, const Overrides& ov) {
    if (ov.seed) cfg.set_seed(*ov.seed);
    if (ov.out) cfg.output_dir = *ov.out;
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "config.resolved.ini", config::echo(cfg));
    return cfg.output_dir;
}

json base_sidecar(const std::string& command, const RunConfig& cfg, std::size_t threads) {
    return {{"command", command},
            {"seed", cfg.seed},
            {"threads", threads},
            {"config", "config.resolved.ini"},
            {"attack", cfg.attack.to_json()}};
}

void write_sidecar(const fs::path& dir, const json& j) { write_text(dir / "run.json", j.dump(2) + "\n"); }

Classifier load_model(const RunConfig& cfg, const Overrides& ov) {
    if (!ov.checkpoint) throw ConfigError("--checkpoint: required for this command");
    const Checkpoint ckpt = load_checkpoint(*ov.checkpoint);
    if (!cfg.arch.empty() && !(ArchDescriptor::parse(cfg.arch) == ckpt.arch)) {
        throw std::runtime_error("checkpoint architecture " + ckpt.arch.to_string() + " does not match model.arch " +
                                 cfg.arch);
    }
    return ckpt.restore();
}

void check_shapes(const Classifier& model, const Dataset& data) {
    if (model.input_shape() != data.sample_shape() || model.num_classes() != data.num_classes()) {
        throw std::runtime_error("model expects " + shape_str(model.input_shape()) + " with " +
                                 std::to_string(model.num_classes()) + " classes, data has " +
                                 shape_str(data.sample_shape()) + " with " + std::to_string(data.num_classes()));
    }
}

std::string opt_str(std::optional<double> v) { return v ? csv::format(*v) : std::string("-"); }

void write_telemetry(const fs::path& dir, const telemetry::TelemetryLog& log) {
    telemetry::write_epochs_csv(dir / "epochs.csv", log.epochs);
    telemetry::write_batches_csv(dir / "batches.csv", log.batches);
    fs::create_directories(dir / "snapshots");
    fs::create_directories(dir / "quiver");
    for (const auto& s : log.snapshots) {
        telemetry::write_snapshot_csv(dir / "snapshots" / epoch_name("epoch", s.epoch, ".csv"), s);
        telemetry::write_quiver_csv(dir / "quiver" / epoch_name("epoch", s.epoch, ".csv"), s);
    }
}

}  // namespace

void cmd_train(RunConfig cfg, const Overrides& ov, std::ostream& log) {
    cfg.require({"data.source", "model.arch", "attack.kind", "train.method"});
    if (ov.checkpoint) throw ConfigError("--checkpoint: not used by train");
    const std::size_t threads = config::thread_cap();
    const fs::path dir = prepare(cfg, ov);
    const config::Splits data = config::load_data(cfg);
    Classifier model = Classifier::build(ArchDescriptor::parse(cfg.arch), derive_seed(cfg.seed, "init"));
    check_shapes(model, data.train);
    const Dataset* held = data.test ? &*data.test : nullptr;

    training::Trainer trainer(std::move(model), data.train, held, cfg.train, cfg.telemetry);
    json side = base_sidecar("train", cfg, threads);
    side["train"] = cfg.train.to_json();
    side["data"] = {{"source", cfg.data.source},
                    {"train_size", data.train.size()},
                    {"test_size", held ? held->size() : 0}};
    try {
        trainer.run([&](const training::Trainer& t) {
            const auto& r = t.log().epochs.back();
            log << "epoch " << r.epoch << "/" << cfg.train.epochs << " loss " << csv::format(r.train_loss)
                << " clean_train " << csv::format(r.clean_train_acc) << " adv_train " << csv::format(r.adv_train_acc)
                << " pgd_test " << opt_str(r.pgd_test_acc) << " fgsm_test " << opt_str(r.fgsm_test_acc)
                << " dE(x) " << csv::format(r.mean_delta_e_x) << " aae " << r.aae_count << "\n";
        });
    } catch (const training::TrainingDiverged& e) {
        save_checkpoint(dir / "diverged.ckpt", e.state());
        write_telemetry(dir, trainer.log());
        side["status"] = "diverged";
        side["error"] = e.what();
        write_sidecar(dir, side);
        throw;
    }

    const auto& tl = trainer.log();
    write_telemetry(dir, tl);
    save_checkpoint(dir / "last.ckpt", trainer.checkpoint());
    if (auto best = trainer.best_checkpoint()) save_checkpoint(dir / "best.ckpt", *best);
    const auto samples = telemetry::class_samples(trainer.model(), data.train);
    telemetry::write_class_samples_csv(dir / "class_samples.csv", samples);
    const auto stats = telemetry::aggregate_class_stats(samples, data.train.num_classes());
    telemetry::write_per_class_csv(dir / "per_class.csv", stats);

    const auto co = telemetry::detect_co(tl, cfg.telemetry.thresholds);
    const auto ro = telemetry::detect_ro(tl, cfg.telemetry.thresholds);
    side["status"] = "ok";
    side["co_epoch"] = co ? json(*co) : json(nullptr);
    side["ro_epoch"] = ro ? json(*ro) : json(nullptr);
    if (auto best = trainer.best_checkpoint()) side["best_epoch"] = best->epoch;
    write_sidecar(dir, side);
    log << "co: " << (co ? "epoch " + std::to_string(*co) : std::string("none")) << "\n";
    log << "ro: " << (ro ? "epoch " + std::to_string(*ro) : std::string("none")) << "\n";
}

void cmd_attack(RunConfig cfg, const Overrides& ov, std::ostream& log) {
    cfg.require({"data.source", "attack.kind"});
    const std::size_t threads = config::thread_cap();
    const Classifier model = load_model(cfg, ov);
    const fs::path dir = prepare(cfg, ov);
    const config::Splits data = config::load_data(cfg);
    const Dataset& set = data.test ? *data.test : data.train;
    check_shapes(model, set);

    Rng rng = make_rng(cfg.seed, "attack_cmd");
    const std::size_t k = model.num_classes();
    csv::Writer w(dir / "energies.csv", {"index", "label", "e_x", "e_xy", "e_xadv", "e_xadv_y", "pred_clean", "pred_adv"});
    std::size_t ok_clean = 0, ok_adv = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < set.size(); start += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(set.size(), start + kChunk); ++i) idx.push_back(i);
        const Tensor x = set.batch(idx);
        const auto y = set.batch_labels(idx);
        const Tensor xa = attacks::run_attack(model, x, y, cfg.attack, rng);
        NoGradGuard no_grad;
        const Tensor zc = model.logits(x), za = model.logits(xa);
        const auto pc = training::predict(zc), pa = training::predict(za);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto rec = energy::EnergyRecord::from_logits(zc.data().subspan(r * k, k), za.data().subspan(r * k, k), y[r]);
            ok_clean += pc[r] == y[r];
            ok_adv += pa[r] == y[r];
            w.cell(idx[r]).cell(y[r]).cell(rec.e_x).cell(rec.e_xy).cell(rec.e_xadv).cell(rec.e_xadv_y).cell(pc[r]).cell(pa[r]);
            w.end_row();
        }
    }
    const double clean = 100.0 * double(ok_clean) / double(set.size());
    const double adv = 100.0 * double(ok_adv) / double(set.size());
    json side = base_sidecar("attack", cfg, threads);
    side["checkpoint"] = ov.checkpoint->string();
    side["split"] = to_string(set.split());
    side["n"] = set.size();
    side["clean_acc"] = clean;
    side["adv_acc"] = adv;
    write_sidecar(dir, side);
    log << "attack " << attacks::to_string(cfg.attack.kind) << " eps " << csv::format(cfg.attack.epsilon) << " on "
        << set.size() << " " << to_string(set.split()) << " samples: clean_acc " << csv::format(clean)
        << " adv_acc " << csv::format(adv) << "\n";
}

void cmd_analyze(const fs::path& run_dir, const Overrides& ov, std::ostream& log) {
    std::vector<std::string> missing;
    for (const char* f : {"epochs.csv", "class_samples.csv", "config.resolved.ini"}) {
        if (!fs::exists(run_dir / f)) missing.push_back((run_dir / f).string());
    }
    if (!missing.empty()) {
        std::string msg = "analyze: missing files:";
        for (const auto& m : missing) msg += " " + m;
        throw std::runtime_error(msg);
    }
    const RunConfig cfg = config::load(run_dir / "config.resolved.ini");
    const fs::path out = ov.out.value_or(run_dir / "analysis");
    fs::create_directories(out);

    telemetry::TelemetryLog tl;
    for (auto& row : telemetry::read_epochs_csv(run_dir / "epochs.csv")) tl.append(row);
    const auto& th = cfg.telemetry.thresholds;
    const auto co = telemetry::detect_co(tl, th);
    const auto ro = telemetry::detect_ro(tl, th);

    csv::Writer de(out / "delta_e.csv", {"epoch", "mean_delta_e_x", "mean_delta_e_xy", "median_delta_e_x",
                                         "median_delta_e_xy", "mean_shift_norm", "clean_train_acc", "adv_train_acc",
                                         "pgd_test_acc", "fgsm_test_acc"});
    csv::Writer aae(out / "aae_counts.csv", {"epoch", "aae_count", "mean_e_x_aae", "mean_e_x_nae"});
    for (const auto& r : tl.epochs) {
        de.cell(r.epoch).cell(r.mean_delta_e_x).cell(r.mean_delta_e_xy).cell(r.median_delta_e_x)
            .cell(r.median_delta_e_xy).cell(r.mean_shift_norm).cell(r.clean_train_acc).cell(r.adv_train_acc)
            .cell(r.pgd_test_acc).cell(r.fgsm_test_acc);
        de.end_row();
        aae.cell(r.epoch).cell(r.aae_count).cell(r.mean_e_x_aae).cell(r.mean_e_x_nae);
        aae.end_row();
    }

    const auto samples = telemetry::read_class_samples_csv(run_dir / "class_samples.csv");
    std::size_t classes = 2;
    for (const auto& s : samples) classes = std::max(classes, s.label + 1);
    telemetry::write_per_class_csv(out / "per_class.csv", telemetry::aggregate_class_stats(samples, classes));

    // Snapshot audit: epoch aggregates recomputed from the raw per-sample rows.
    csv::Writer audit(out / "snapshot_audit.csv",
                      {"epoch", "mean_delta_e_x", "mean_delta_e_xy", "mean_shift_norm", "aae_count", "max_abs_dev"});
    double worst = 0.0;
    if (fs::exists(run_dir / "snapshots")) {
        for (const auto& r : tl.epochs) {
            const fs::path p = run_dir / "snapshots" / epoch_name("epoch", r.epoch, ".csv");
            if (!fs::exists(p)) continue;
            const auto snap = telemetry::read_snapshot_csv(p, r.epoch);
            const auto again = telemetry::summarize(r.epoch, snap.samples);
            const double dev = std::max({std::abs(again.mean_delta_e_x - r.mean_delta_e_x),
                                         std::abs(again.mean_delta_e_xy - r.mean_delta_e_xy),
                                         std::abs(again.mean_shift_norm - r.mean_shift_norm),
                                         std::abs(double(again.aae_count) - double(r.aae_count))});
            worst = std::max(worst, dev);
            audit.cell(r.epoch).cell(again.mean_delta_e_x).cell(again.mean_delta_e_xy).cell(again.mean_shift_norm)
                .cell(again.aae_count).cell(dev);
            audit.end_row();
        }
    }

    json verdict = {{"co_epoch", co ? json(*co) : json(nullptr)},
                    {"ro_epoch", ro ? json(*ro) : json(nullptr)},
                    {"epochs", tl.epochs.size()},
                    {"snapshot_max_abs_dev", worst},
                    {"thresholds",
                     {{"co_pgd_floor", th.co_pgd_floor},
                      {"co_fgsm_ceiling", th.co_fgsm_ceiling},
                      {"ro_drop", th.ro_drop},
                      {"ro_window", th.ro_window}}}};
    write_text(out / "verdict.json", verdict.dump(2) + "\n");
    log << "co: " << (co ? "epoch " + std::to_string(*co) : std::string("none")) << "\n";
    log << "ro: " << (ro ? "epoch " + std::to_string(*ro) : std::string("none")) << "\n";
    log << "snapshot audit max deviation: " << csv::format(worst) << "\n";
}

void cmd_generate(RunConfig cfg, const Overrides& ov, std::ostream& log) {
    cfg.require({"data.source"});
    const std::size_t threads = config::thread_cap();
    const Classifier model = load_model(cfg, ov);
    const fs::path dir = prepare(cfg, ov);
    const config::Splits data = config::load_data(cfg);
    check_shapes(model, data.train);
    const Shape shape = model.input_shape();
    if (shape.size() != 3) throw std::runtime_error("generate: model inputs " + shape_str(shape) + " are not images");

    const auto stats = generation::class_energy_stats(model, data.train);
    std::vector<std::size_t> classes = cfg.gen.classes;
    if (classes.empty()) {
        for (std::size_t c = 0; c < model.num_classes(); ++c) classes.push_back(c);
    }
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "traces");
    csv::Writer summary(dir / "summary.csv", {"class", "sample", "start_index", "iterations", "reached_threshold",
                                              "final_e_target", "threshold", "init_warning"});
    for (std::size_t c : classes) {
        if (c >= model.num_classes()) throw ConfigError("gen.classes: class " + std::to_string(c) + " out of range");
        generation::GenSpec spec = cfg.gen.spec;
        spec.target_class = c;
        const auto out = generation::generate_class(model, data.train, stats, spec, cfg.gen.count);
        for (std::size_t s = 0; s < out.size(); ++s) {
            const auto& g = out[s];
            const std::string stem = "c" + std::to_string(c) + "_s" + std::to_string(s);
            generation::write_image(dir / "images" / (stem + (shape[0] == 3 ? ".ppm" : ".pgm")), g.result.image, shape);
            generation::write_trace_csv(dir / "traces" / (stem + ".csv"), g.result.trace);
            const double final_e = g.result.trace.back().e_target;
            summary.cell(c).cell(s).cell(g.start_index).cell(g.result.iterations).cell(g.result.reached_threshold)
                .cell(final_e).cell(stats.threshold(c)).cell(g.init.warning ? std::string_view("1") : std::string_view("0"));
            summary.end_row();
            log << "class " << c << " sample " << s << ": iterations " << g.result.iterations << " final E(x,y) "
                << csv::format(final_e) << " threshold " << csv::format(stats.threshold(c))
                << (g.result.reached_threshold ? "" : " (max_iters)") << "\n";
        }
    }
    json side = base_sidecar("generate", cfg, threads);
    side["checkpoint"] = ov.checkpoint->string();
    side["gen"] = cfg.gen.spec.to_json();
    side["classes"] = classes;
    side["count"] = cfg.gen.count;
    write_sidecar(dir, side);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"elat: energy-lens adversarial training lab"};
    app.require_subcommand(1);
    std::string config_path, checkpoint, out_dir, run_dir;
    std::uint64_t seed = 0;
    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", config_path, "INI config file");
        if (needs_config) c->required();
        sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
        sub->add_option("--seed", seed, "root seed (overrides seed)");
    };
    auto* train = app.add_subcommand("train", "adversarial training with telemetry");
    add_common(train, true);
    train->add_option("--checkpoint", checkpoint, "not used by train");
    auto* attack = app.add_subcommand("attack", "evaluate a checkpoint under the configured attack");
    add_common(attack, true);
    attack->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    auto* analyze = app.add_subcommand("analyze", "CO/RO verdicts and plot-ready exports of a run");
    analyze->add_option("run_dir", run_dir, "directory written by train")->required();
    analyze->add_option("--out", out_dir, "output directory (default RUN_DIR/analysis)");
    auto* generate = app.add_subcommand("generate", "energy-guided SGLD generation");
    add_common(generate, true);
    generate->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    Overrides ov;
    if (!checkpoint.empty()) ov.checkpoint = checkpoint;
    if (!out_dir.empty()) ov.out = out_dir;
    for (auto* sub : {train, attack, generate}) {
        if (sub->parsed() && sub->count("--seed")) ov.seed = seed;
    }
    try {
        if (analyze->parsed()) {
            cmd_analyze(run_dir, ov, out);
            return kOk;
        }
        RunConfig cfg = config::load(config_path);
        if (train->parsed()) cmd_train(std::move(cfg), ov, out);
        if (attack->parsed()) cmd_attack(std::move(cfg), ov, out);
        if (generate->parsed()) cmd_generate(std::move(cfg), ov, out);
        return kOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
}

}  // namespace elat::cli
