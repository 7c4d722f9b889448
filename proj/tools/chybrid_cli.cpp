// Command-line driver: gen-corpus | train | eval | inspect.
//
// Exit codes: 0 ok, 2 usage/config, 3 numeric abort, 4 I/O or file format.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "chybrid/chybrid.hpp"

namespace fs = std::filesystem;
using namespace chybrid;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd, bool required) {
        auto* opt = cmd->add_option("--config,-c", path, "Run config (sectioned key = value)");
        if (required) opt->required()->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "Override a config key: key=value (repeatable)");
    }

    RunConfig resolve() const {
        RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
        for (const auto& o : overrides) apply_override(cfg, o);
        cfg.validate();
        return cfg;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write '" + path.string() + "'");
    os << text;
}

int cmd_gen_corpus(const ConfigArgs& args, const std::string& out, const std::string& dev_out, bool force) {
    const RunConfig cfg = args.resolve();
    for (const auto& p : {out, dev_out})
        if (!p.empty() && fs::exists(p) && !force)
            throw ConfigError("'" + p + "' exists; pass --force to overwrite");
    const Corpus train = generate(cfg.corpus);
    save_corpus(out, train);
    std::size_t frames = 0;
    for (const auto& u : train) frames += u.frames();
    std::cout << "wrote " << train.size() << " utterances (" << frames << " frames) to " << out << "\n";
    if (!dev_out.empty()) {
        const Corpus dev = generate_dev(cfg.corpus);
        save_corpus(dev_out, dev);
        std::cout << "wrote " << dev.size() << " dev utterances to " << dev_out << "\n";
    }
    return 0;
}

int cmd_train(const ConfigArgs& args, const std::vector<std::string>& ablations, const std::string& resume) {
    RunConfig cfg = args.resolve();
    for (const auto& a : ablations) apply_override(cfg, a);
    cfg.validate();
    if (cfg.corpus_path.empty()) throw ConfigError("corpus_path is not set");

    Corpus train = load_corpus(cfg.corpus_path);
    Corpus dev = cfg.dev_corpus_path.empty() ? Corpus{} : load_corpus(cfg.dev_corpus_path);
    Trainer trainer(cfg, std::move(train), std::move(dev));

    const fs::path out_dir = cfg.out_dir;
    fs::create_directories(out_dir);
    write_text(out_dir / "config.resolved.ini", config_to_text(cfg));
    const std::string metrics_path = (out_dir / "metrics.jsonl").string();
    if (!resume.empty()) {
        trainer.load_checkpoint(resume);
    } else {
        write_text(metrics_path, "");
    }

    const std::string ckpt = (out_dir / "checkpoint.last.bin").string();
    int status = 0;
    try {
        trainer.train(cfg.optim.epochs, [&](const EpochMetrics& m) {
            append_metrics(metrics_path, m);
            trainer.save_checkpoint(ckpt);
            std::printf("epoch %3llu  step %6llu  train_ce %.5f  dev_ce %.5f  dev_fer %.4f  lr %.6g\n",
                        static_cast<unsigned long long>(m.epoch), static_cast<unsigned long long>(m.step), m.train_ce,
                        m.dev_ce, m.frame_error_rate, m.lr);
            std::fflush(stdout);
        });
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        status = kExitNumeric;
    }

    const auto& st = trainer.state();
    nlohmann::json summary = {{"status", status == 0 ? "ok" : "numeric_abort"},
                              {"epochs", st.epoch},
                              {"steps", st.step},
                              {"newbob_decays", st.num_decays},
                              {"best_dev_ce", st.best_dev},
                              {"final_dev_ce", st.dev_history.empty() ? 0.0 : st.dev_history.back()}};
    write_text(out_dir / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
    return status;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_path, std::size_t frame_budget) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    Rng init(0);
    Model model(ck.config, init);
    restore_params(model.params(), ck);
    const Corpus corpus = load_corpus(corpus_path);
    std::size_t budget = frame_budget ? frame_budget : ck.config.optim.frame_budget;
    for (const auto& u : corpus) budget = std::max(budget, u.frames());
    const FrameStats stats = evaluate(model, corpus, budget);
    nlohmann::json out = {{"ce", stats.ce()}, {"frame_error_rate", stats.error_rate()}, {"frames", stats.frames}};
    std::cout << out.dump() << "\n";
    return 0;
}

void print_census(const Census& c) {
    std::printf("%-16s %14s %14s\n", "module", "declared", "unique");
    std::size_t blocks = 0, blocks_unique = 0, nblocks = 0;
    for (const auto& g : c.groups) {
        std::printf("%-16s %14zu %14zu\n", g.name.c_str(), g.declared, g.unique);
        if (g.name.rfind("block.", 0) == 0) {
            blocks += g.declared;
            blocks_unique += g.unique;
            ++nblocks;
        }
    }
    std::printf("%-16s %14zu %14zu  (%zu blocks)\n", "blocks total", blocks, blocks_unique, nblocks);
    std::printf("%-16s %14zu %14zu\n", "total", c.declared, c.unique);
    std::printf("aliased (shared) parameters: %zu\n", c.aliased());
    std::printf("total unique: %.2fM\n", static_cast<double>(c.unique) / 1e6);
}

int cmd_inspect(const std::string& checkpoint, const ConfigArgs& args) {
    if (checkpoint.empty() == args.path.empty() && !(checkpoint.empty() && !args.overrides.empty()))
        throw ConfigError("inspect needs exactly one of --checkpoint or --config");
    RunConfig cfg;
    if (!checkpoint.empty()) {
        cfg = load_checkpoint(checkpoint).config;
        for (const auto& o : args.overrides) apply_override(cfg, o);
    } else {
        cfg = args.resolve();
    }
    print_census(census(cfg));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformer hybrid acoustic model training on synthetic frame-aligned corpora"};
    app.require_subcommand(1);

    ConfigArgs gen_args, train_args, inspect_args;
    std::string out, dev_out, resume, checkpoint, corpus;
    std::size_t frame_budget = 0;
    bool force = false;
    std::vector<std::string> ablations;

    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus file");
    gen_args.attach(gen, true);
    gen->add_option("--out,-o", out, "Output corpus path")->required();
    gen->add_option("--dev-out", dev_out, "Also write the held-out dev split here");
    gen->add_flag("--force", force, "Overwrite existing files");

    auto* train = app.add_subcommand("train", "Train a model; writes checkpoints and metrics to out_dir");
    train_args.attach(train, true);
    train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    auto ablation = [&](const char* flag, const char* assignment, const char* help) {
        train->add_flag_callback(flag, [&ablations, assignment] { ablations.emplace_back(assignment); }, help);
    };
    ablation("--no-specaugment", "specaugment=false", "Disable SpecAugment");
    ablation("--no-intermediate-loss", "intermediate_loss=false", "Drop the intermediate loss heads");
    ablation("--no-long-skip", "long_skip=false", "Disable LongSkip");
    ablation("--no-focal-loss", "focal_loss=false", "Plain cross-entropy instead of focal loss");
    ablation("--no-share-transposed-conv", "share_transposed_conv=false", "Separate transposed convs per head");
    ablation("--share-mlp", "share_mlp=true", "Share the intermediate-head MLP");

    auto* eval = app.add_subcommand("eval", "Frame-level CE and error rate of a checkpoint on a corpus");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--corpus", corpus, "Corpus file")->required();
    eval->add_option("--frame-budget", frame_budget, "Batch frame budget (default: from checkpoint config)");

    auto* inspect = app.add_subcommand("inspect", "Parameter census of a checkpoint or config");
    inspect->add_option("--checkpoint", checkpoint, "Checkpoint file");
    inspect_args.attach(inspect, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*gen) return cmd_gen_corpus(gen_args, out, dev_out, force);
        if (*train) return cmd_train(train_args, ablations, resume);
        if (*eval) return cmd_eval(checkpoint, corpus, frame_budget);
        if (*inspect) return cmd_inspect(checkpoint, inspect_args);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
