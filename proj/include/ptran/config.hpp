#pragma once

#include <cmath>
#include <string>

#include "json.hpp"
#include "ptran/common.hpp"

namespace ptran {

enum class Decomposition { Full, UV, UVW };
enum class GlobalVariant { None, AllDep, DepSplit, SingleSplit };
enum class EnginePath { Scalar, General, TransformerForm };

inline std::string to_string(Decomposition d) {
    switch (d) {
        case Decomposition::Full: return "full";
        case Decomposition::UV: return "uv";
        case Decomposition::UVW: return "uvw";
    }
    return "?";
}
inline std::string to_string(GlobalVariant g) {
    switch (g) {
        case GlobalVariant::None: return "none";
        case GlobalVariant::AllDep: return "all_dep";
        case GlobalVariant::DepSplit: return "dep_split";
        case GlobalVariant::SingleSplit: return "single_split";
    }
    return "?";
}
inline std::string to_string(EnginePath p) {
    switch (p) {
        case EnginePath::Scalar: return "scalar";
        case EnginePath::General: return "general";
        case EnginePath::TransformerForm: return "transformer_form";
    }
    return "?";
}

inline Decomposition decomposition_from(const std::string& s) {
    if (s == "full") return Decomposition::Full;
    if (s == "uv") return Decomposition::UV;
    if (s == "uvw") return Decomposition::UVW;
    throw ContractError("unknown decomposition: " + s);
}
inline GlobalVariant global_variant_from(const std::string& s) {
    if (s == "none") return GlobalVariant::None;
    if (s == "all_dep") return GlobalVariant::AllDep;
    if (s == "dep_split") return GlobalVariant::DepSplit;
    if (s == "single_split") return GlobalVariant::SingleSplit;
    throw ContractError("unknown global variant: " + s);
}
inline EnginePath engine_path_from(const std::string& s) {
    if (s == "scalar") return EnginePath::Scalar;
    if (s == "general") return EnginePath::General;
    if (s == "transformer_form") return EnginePath::TransformerForm;
    throw ContractError("unknown engine path: " + s);
}

// Every structural / inference hyperparameter of the model.
struct ModelConfig {
    int d = 64;             // label-set size
    int h = 4;              // channels
    int T_iters = 3;        // inference iterations
    int gamma = 3;          // distance clip threshold
    bool use_distance = true;  // false: single shared bank (distance-insensitive)
    double lambda_Z = 1.0;
    double lambda_H = 0.0;  // 0 means "default to 1/d"
    Decomposition decomposition = Decomposition::UV;
    int rank = 16;
    bool use_root = false;
    int d_root = 64;
    GlobalVariant global_variant = GlobalVariant::None;
    int m = 16;             // global feature count
    double alpha_Z = 1.0, alpha_H = 1.0;  // step sizes
    double beta_Z = 0.0, beta_H = 0.0;    // message damping
    double dropout = 0.0;
    bool use_async = true;
    EnginePath path = EnginePath::General;

    int banks() const { return use_distance ? 2 * gamma + 2 : 1; }

    double effective_lambda_H() const { return lambda_H > 0.0 ? lambda_H : 1.0 / double(d); }

    void validate() const {
        require(d >= 1 && h >= 1 && T_iters >= 1, "d, h, T_iters must be >= 1");
        require(gamma >= 0, "gamma must be >= 0");
        require(lambda_Z > 0.0, "lambda_Z must be positive");
        require(lambda_H >= 0.0, "lambda_H must be >= 0 (0 selects the 1/d default)");
        if (decomposition != Decomposition::Full) require(rank >= 1, "rank must be >= 1 when decomposed");
        require(alpha_Z > 0.0 && alpha_Z <= 1.0 && alpha_H > 0.0 && alpha_H <= 1.0,
                "step sizes must lie in (0, 1]");
        require(beta_Z >= 0.0 && beta_Z < 1.0 && beta_H >= 0.0 && beta_H < 1.0,
                "damping must lie in [0, 1)");
        if (use_root) require(d_root >= 1, "d_root must be >= 1 when use_root");
        if (global_variant != GlobalVariant::None) require(m >= 1, "m must be >= 1 with global variables");
        require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d", c.d},
                       {"h", c.h},
                       {"T_iters", c.T_iters},
                       {"gamma", c.gamma},
                       {"use_distance", c.use_distance},
                       {"lambda_Z", c.lambda_Z},
                       {"lambda_H", c.lambda_H},
                       {"decomposition", to_string(c.decomposition)},
                       {"rank", c.rank},
                       {"use_root", c.use_root},
                       {"d_root", c.d_root},
                       {"global_variant", to_string(c.global_variant)},
                       {"m", c.m},
                       {"alpha_Z", c.alpha_Z},
                       {"alpha_H", c.alpha_H},
                       {"beta_Z", c.beta_Z},
                       {"beta_H", c.beta_H},
                       {"dropout", c.dropout},
                       {"use_async", c.use_async},
                       {"path", to_string(c.path)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.d = j.value("d", c.d);
    c.h = j.value("h", c.h);
    c.T_iters = j.value("T_iters", c.T_iters);
    c.gamma = j.value("gamma", c.gamma);
    c.use_distance = j.value("use_distance", c.use_distance);
    c.lambda_Z = j.value("lambda_Z", c.lambda_Z);
    c.lambda_H = j.value("lambda_H", c.lambda_H);
    c.decomposition = decomposition_from(j.value("decomposition", std::string("uv")));
    c.rank = j.value("rank", c.rank);
    c.use_root = j.value("use_root", c.use_root);
    c.d_root = j.value("d_root", c.d_root);
    c.global_variant = global_variant_from(j.value("global_variant", std::string("none")));
    c.m = j.value("m", c.m);
    c.alpha_Z = j.value("alpha_Z", c.alpha_Z);
    c.alpha_H = j.value("alpha_H", c.alpha_H);
    c.beta_Z = j.value("beta_Z", c.beta_Z);
    c.beta_H = j.value("beta_H", c.beta_H);
    c.dropout = j.value("dropout", c.dropout);
    c.use_async = j.value("use_async", c.use_async);
    c.path = engine_path_from(j.value("path", std::string("general")));
}

// Model + task + data + optimization settings for one run.
struct RunConfig {
    ModelConfig model;
    std::string task = "mlm";  // mlm | tagging | ner | classification | cogs
    std::string train_path, valid_path;
    int token_col = 0, tag_col = 1;  // column corpora
    int batch_size = 32;
    int epochs = 10;
    uint64_t seed = 1;
    int max_len = 64;
    double mask_rate = 0.30;
    int min_freq = 1;
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double weight_decay = 0.0;
    double l2_ternary = 0.0;
    std::string checkpoint_path = "model.ptck";
    std::string log_path = "metrics.jsonl";

    void validate() const {
        model.validate();
        require(batch_size >= 1, "batch_size must be >= 1");
        require(epochs >= 0, "epochs must be >= 0");
        require(max_len >= 1, "max_len must be >= 1");
        require(mask_rate >= 0.0 && mask_rate <= 1.0, "mask_rate must lie in [0, 1]");
        require(lr > 0.0, "lr must be positive");
        require(weight_decay >= 0.0 && l2_ternary >= 0.0, "regularization coefficients must be >= 0");
        if (task != "mlm" && task != "tagging" && task != "ner" && task != "classification" &&
            task != "cogs")
            throw ContractError("unknown task: " + task);
        if (task == "classification") require(model.use_root, "classification requires use_root");
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"task", c.task},
                       {"train_path", c.train_path},
                       {"valid_path", c.valid_path},
                       {"token_col", c.token_col},
                       {"tag_col", c.tag_col},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"seed", c.seed},
                       {"max_len", c.max_len},
                       {"mask_rate", c.mask_rate},
                       {"min_freq", c.min_freq},
                       {"lr", c.lr},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"weight_decay", c.weight_decay},
                       {"l2_ternary", c.l2_ternary},
                       {"checkpoint_path", c.checkpoint_path},
                       {"log_path", c.log_path}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    c = RunConfig{};
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    c.task = j.value("task", c.task);
    c.train_path = j.value("train_path", c.train_path);
    c.valid_path = j.value("valid_path", c.valid_path);
    c.token_col = j.value("token_col", c.token_col);
    c.tag_col = j.value("tag_col", c.tag_col);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.max_len = j.value("max_len", c.max_len);
    c.mask_rate = j.value("mask_rate", c.mask_rate);
    c.min_freq = j.value("min_freq", c.min_freq);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.l2_ternary = j.value("l2_ternary", c.l2_ternary);
    c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
    c.log_path = j.value("log_path", c.log_path);
}

}  // namespace ptran
