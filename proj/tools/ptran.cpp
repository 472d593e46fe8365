// Command-line surface: train / eval / inspect.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "ptran/trainer.hpp"

namespace {

using Real = float;

void apply_thread_cap() {
#ifdef _OPENMP
    if (const char* env = std::getenv("PTRAN_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) omp_set_num_threads(n);
    }
#endif
}

// Dotted-path override: "model.d=128" patches config["model"]["d"]. Values
// parse as JSON when possible, otherwise as strings.
void apply_override(nlohmann::json& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw ptran::ContractError("--set expects key=value, got: " + kv);
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    nlohmann::json* at = &cfg;
    size_t pos = 0;
    while (true) {
        const auto dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (part.empty()) throw ptran::ContractError("--set: empty path segment in " + key);
        if (dot == std::string::npos) {
            (*at)[part] = value;
            return;
        }
        at = &(*at)[part];
        pos = dot + 1;
    }
}

ptran::Corpus load_for_task(const ptran::RunConfig& run, const std::string& path) {
    if (run.task == "mlm") return ptran::load_text_corpus(path);
    if (run.task == "tagging" || run.task == "ner")
        return ptran::load_conll_columns(path, run.token_col, run.tag_col);
    if (run.task == "classification") return ptran::load_label_tsv(path);
    return ptran::load_cogs_tsv(path);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& resume_path) {
    nlohmann::json cfg;
    {
        std::ifstream in(config_path);
        if (!in) throw ptran::IoError("cannot open config " + config_path);
        try {
            in >> cfg;
        } catch (const nlohmann::json::exception& e) {
            throw ptran::ContractError(std::string("invalid config JSON: ") + e.what());
        }
    }
    for (const auto& kv : overrides) apply_override(cfg, kv);
    ptran::RunConfig run = cfg.get<ptran::RunConfig>();
    run.validate();
    if (run.train_path.empty() || run.valid_path.empty())
        throw ptran::ContractError("config must set train_path and valid_path");

    ptran::Corpus train_c = load_for_task(run, run.train_path);
    ptran::Corpus valid_c = load_for_task(run, run.valid_path);

    ptran::Trainer<Real> tr = resume_path.empty()
                                  ? ptran::make_trainer<Real>(run, train_c)
                                  : ptran::trainer_from_checkpoint(
                                        ptran::load_checkpoint<Real>(resume_path));
    if (!resume_path.empty()) tr.run = run;  // allow e.g. extending epochs on resume

    ptran::Encoded train_d = ptran::encode_dataset(train_c, tr.vocab, tr.tagsets, tr.run);
    ptran::Encoded valid_d = ptran::encode_dataset(valid_c, tr.vocab, tr.tagsets, tr.run);

    std::ofstream log(tr.run.log_path, std::ios::app);
    if (!log) throw ptran::IoError("cannot open log " + tr.run.log_path);
    ptran::train(tr, train_d, valid_d, &log);
    std::cout << "checkpoint written to " << tr.run.checkpoint_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, const std::string& task) {
    ptran::Checkpoint<Real> ck = ptran::load_checkpoint<Real>(ckpt);
    if (!task.empty() && task != ck.run.task)
        throw ptran::ContractError("checkpoint was trained for task '" + ck.run.task +
                                   "', not '" + task + "'");
    ptran::Trainer<Real> tr = ptran::trainer_from_checkpoint(std::move(ck));
    ptran::Corpus corpus = load_for_task(tr.run, data_path);
    ptran::Encoded data = ptran::encode_dataset(corpus, tr.vocab, tr.tagsets, tr.run);
    for (const auto& m : ptran::evaluate(tr, data)) {
        nlohmann::json j = {{"task", tr.run.task},
                            {"split", "eval"},
                            {"metric", m.metric},
                            {"value", m.value},
                            {"n_items", m.n_items}};
        std::cout << j.dump() << "\n";
    }
    return 0;
}

int cmd_inspect(const std::string& ckpt, const std::string& sentence) {
    std::istringstream ss(sentence);
    std::vector<std::string> words;
    std::string w;
    while (ss >> w) words.push_back(w);
    if (words.empty()) throw ptran::ContractError("inspect: empty sentence");

    ptran::Checkpoint<Real> ck = ptran::load_checkpoint<Real>(ckpt);
    std::vector<int64_t> ids = ptran::encode(ck.vocab, words);
    ptran::ContextualReps<Real> reps = ptran::run_inference_tensorized(ck.params, ids);

    auto heads = ptran::extract_dependency_heads(reps.Qh);
    const ptran::HeadLayout& lay = reps.layout;
    for (size_t c = 0; c < heads.size(); ++c) {
        std::cout << "channel " << c << "\n";
        for (size_t i = 0; i < heads[c].size(); ++i) {
            const int64_t j = heads[c][i].head;
            std::string target;
            if (j < lay.n) target = std::to_string(j) + ":" + words[size_t(j)];
            else if (lay.has_root && j == lay.root_col()) target = "ROOT";
            else target = "G" + std::to_string(j - lay.global_col0());
            char prob[16];
            std::snprintf(prob, sizeof(prob), "%.2f", double(heads[c][i].probability));
            std::cout << "  " << i << ":" << words[i] << " -> " << target << " (" << prob
                      << ")\n";
        }
    }
    if (ck.run.model.use_root) {
        std::cout << "root representation:";
        for (int64_t g = 0; g < reps.root_rep.dim(1); ++g)
            std::cout << " " << reps.root_rep(0, g);
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"probabilistic-transformer trainer"};
    app.require_subcommand(1);

    std::string config_path, resume_path;
    std::vector<std::string> overrides;
    CLI::App* train = app.add_subcommand("train", "train a model from a JSON config");
    train->add_option("--config", config_path, "JSON run config")->required();
    train->add_option("--set", overrides, "dotted-path overrides, key=value");
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    std::string ckpt, data_path, task, sentence;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval->add_option("--data", data_path, "dataset path")->required();
    eval->add_option("--task", task, "task name (must match the checkpoint)");

    CLI::App* inspect = app.add_subcommand("inspect", "print per-channel dependency heads");
    inspect->add_option("--ckpt", ckpt, "checkpoint path")->required();
    inspect->add_option("--sentence", sentence, "sentence to analyze")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, overrides, resume_path);
        if (eval->parsed()) return cmd_eval(ckpt, data_path, task);
        return cmd_inspect(ckpt, sentence);
    } catch (const ptran::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
