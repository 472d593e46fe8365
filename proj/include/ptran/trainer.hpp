#pragma once

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ptran/checkpoint.hpp"
#include "ptran/data.hpp"
#include "ptran/mfvi.hpp"
#include "ptran/synth.hpp"
#include "ptran/tasks.hpp"

namespace ptran {

// Sentences encoded against a fixed vocabulary and target inventories.
struct Encoded {
    std::vector<std::vector<int64_t>> ids;
    std::vector<std::vector<int64_t>> tags;             // tagging / ner
    std::vector<std::vector<std::string>> tag_strings;  // gold strings for span F1
    std::vector<int64_t> labels;                        // classification
    std::vector<std::array<std::vector<int64_t>, 5>> cogs;

    size_t size() const { return ids.size(); }
};

inline std::vector<TagSet> build_tagsets(const Corpus& corpus, const std::string& task) {
    std::vector<TagSet> sets;
    if (task == "tagging" || task == "ner") {
        TagSet t;
        for (const auto& sent : corpus.tags)
            for (const auto& tag : sent) t.add(tag);
        sets.push_back(std::move(t));
    } else if (task == "classification") {
        int64_t mx = 0;
        for (int64_t l : corpus.labels) {
            require(l >= 0, "classification labels must be >= 0");
            mx = std::max(mx, l);
        }
        TagSet t;
        for (int64_t l = 0; l <= mx; ++l) t.add(std::to_string(l));
        sets.push_back(std::move(t));
    } else if (task == "cogs") {
        for (int col = 0; col < 4; ++col) {
            TagSet t;
            for (const auto& sent : corpus.cogs_tags)
                for (const auto& tag : sent[size_t(col)]) t.add(tag);
            sets.push_back(std::move(t));
        }
    }
    return sets;
}

inline std::vector<int64_t> head_out_sizes(const std::string& task, int64_t vocab_size,
                                           const std::vector<TagSet>& sets) {
    if (task == "mlm") return {vocab_size};
    if (task == "tagging" || task == "ner") return {sets.at(0).size()};
    if (task == "classification") return {sets.at(0).size()};
    if (task == "cogs") {
        std::vector<int64_t> out = {kCogsOffsetClasses};
        for (const auto& s : sets) out.push_back(s.size());
        return out;
    }
    throw ContractError("unknown task: " + task);
}

inline Encoded encode_dataset(const Corpus& corpus, const Vocab& vocab,
                              const std::vector<TagSet>& sets, const RunConfig& run) {
    Encoded e;
    bool warned = false;
    for (size_t s = 0; s < corpus.size(); ++s) {
        std::vector<int64_t> ids = encode(vocab, corpus.sentences[s]);
        if (int64_t(ids.size()) > run.max_len) {
            if (!warned) {
                std::cerr << "warning: truncating sentences longer than " << run.max_len
                          << " tokens\n";
                warned = true;
            }
            ids.resize((size_t)run.max_len);
        }
        const size_t n = ids.size();
        e.ids.push_back(std::move(ids));
        if (run.task == "tagging" || run.task == "ner") {
            std::vector<int64_t> tg;
            std::vector<std::string> ts;
            for (size_t i = 0; i < n; ++i) {
                tg.push_back(sets.at(0).id_of(corpus.tags[s][i]));
                ts.push_back(corpus.tags[s][i]);
            }
            e.tags.push_back(std::move(tg));
            e.tag_strings.push_back(std::move(ts));
        } else if (run.task == "classification") {
            require(corpus.labels[s] >= 0 && corpus.labels[s] < sets.at(0).size(),
                    "label outside the training inventory");
            e.labels.push_back(corpus.labels[s]);
        } else if (run.task == "cogs") {
            std::array<std::vector<int64_t>, 5> rows;
            for (size_t i = 0; i < n; ++i) {
                rows[0].push_back(corpus.cogs_parent[s][i]);
                for (int t = 0; t < 4; ++t)
                    rows[size_t(t) + 1].push_back(sets.at(size_t(t)).id_of(
                        corpus.cogs_tags[s][size_t(t)][i]));
            }
            e.cogs.push_back(std::move(rows));
        }
    }
    return e;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class Real>
struct TrainSlots {
    std::vector<std::string> names;
    std::vector<Tensor<Real>*> params, grads;
};

template <class Real>
TrainSlots<Real> collect_slots(Parameters<Real>& p, TaskHead<Real>& head) {
    TrainSlots<Real> s;
    for (auto& [name, t] : p.named_tensors()) {
        s.names.push_back(name);
        s.params.push_back(t);
    }
    for (auto& [name, t] : p.named_grads()) s.grads.push_back(t);
    for (size_t i = 0; i < head.P.size(); ++i) {
        s.names.push_back(head.names[i]);
        s.params.push_back(&head.P[i]);
        s.grads.push_back(&head.g[i]);
    }
    return s;
}

// Adam with bias correction; decoupled weight decay is applied
// multiplicatively to the parameter before the moment update.
template <class Real>
void adam_step(const TrainSlots<Real>& slots, std::vector<Tensor<Real>>& m,
               std::vector<Tensor<Real>>& v, int64_t& step, const RunConfig& run) {
    if (m.empty()) {
        for (Tensor<Real>* p : slots.params) {
            m.emplace_back(p->shape);
            v.emplace_back(p->shape);
        }
    }
    require(m.size() == slots.params.size() && v.size() == slots.params.size(),
            "optimizer state does not match the parameter list");
    ++step;
    const Real b1 = Real(run.beta1), b2 = Real(run.beta2);
    const Real lr = Real(run.lr), eps = Real(run.adam_eps);
    const Real bc1 = Real(1) - Real(std::pow(run.beta1, double(step)));
    const Real bc2 = Real(1) - Real(std::pow(run.beta2, double(step)));
    for (size_t t = 0; t < slots.params.size(); ++t) {
        Tensor<Real>& theta = *slots.params[t];
        const Tensor<Real>& g = *slots.grads[t];
        if (!g.all_finite())
            throw Error("NaN/inf gradient in tensor " + slots.names[t]);
        for (int64_t i = 0; i < theta.numel(); ++i) {
            if (run.weight_decay > 0) theta(i) *= Real(1) - lr * Real(run.weight_decay);
            Real& mi = m[t](i);
            Real& vi = v[t](i);
            mi = b1 * mi + (Real(1) - b1) * g(i);
            vi = b2 * vi + (Real(1) - b2) * g(i) * g(i);
            theta(i) -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
        }
    }
}

// Total loss with the L2-on-ternary term (applied to the factor tensors
// under decomposition).
template <class Real>
Real regularized_loss(Real task_loss, Parameters<Real>& params, double coeff) {
    require(coeff >= 0.0, "l2 coefficient must be >= 0");
    Real reg = 0;
    for (auto& [name, t] : params.ternary_tensors())
        for (int64_t i = 0; i < t->numel(); ++i) reg += (*t)(i) * (*t)(i);
    return task_loss + Real(coeff) * reg;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <class Real>
struct Trainer {
    RunConfig run;
    Vocab vocab;
    std::vector<TagSet> tagsets;
    Parameters<Real> params;
    TaskHead<Real> head;
    std::vector<Tensor<Real>> adam_m, adam_v;
    int64_t adam_step_count = 0;
    int64_t epoch_done = 0;
    Rng rng{1};
    double best_metric = 0.0;
    bool has_best = false;

    bool lower_is_better() const { return run.task == "mlm"; }
    std::string selection_metric() const {
        if (run.task == "mlm") return "perplexity";
        if (run.task == "ner") return "f1";
        if (run.task == "cogs") return "sentence_accuracy";
        return "accuracy";
    }
};

template <class Real>
Trainer<Real> make_trainer(const RunConfig& run, const Corpus& train_corpus) {
    run.validate();
    Trainer<Real> tr;
    tr.run = run;
    tr.vocab = build_vocab(train_corpus, run.min_freq);
    tr.tagsets = build_tagsets(train_corpus, run.task);
    tr.params = init_parameters<Real>(run.model, tr.vocab.size(), run.seed);
    Rng head_rng(run.seed + 1);
    tr.head = make_task_head<Real>(run.task, run.model,
                                   head_out_sizes(run.task, tr.vocab.size(), tr.tagsets),
                                   head_rng);
    tr.rng = Rng(run.seed + 2);
    tr.best_metric = tr.lower_is_better() ? std::numeric_limits<double>::infinity()
                                          : -std::numeric_limits<double>::infinity();
    return tr;
}

template <class Real>
Trainer<Real> trainer_from_checkpoint(Checkpoint<Real>&& ck) {
    Trainer<Real> tr;
    tr.run = ck.run;
    tr.vocab = ck.vocab;
    for (const auto& tags : ck.tagsets) {
        TagSet s;
        for (const auto& t : tags) s.add(t);
        tr.tagsets.push_back(std::move(s));
    }
    tr.params = std::move(ck.params);
    tr.head = std::move(ck.head);
    tr.adam_m = std::move(ck.adam_m);
    tr.adam_v = std::move(ck.adam_v);
    tr.adam_step_count = ck.adam_step;
    tr.epoch_done = ck.epoch;
    tr.rng.set_state(ck.rng_state);
    tr.best_metric = ck.best_metric;
    tr.has_best = ck.has_best;
    if (!tr.has_best)
        tr.best_metric = tr.lower_is_better() ? std::numeric_limits<double>::infinity()
                                              : -std::numeric_limits<double>::infinity();
    return tr;
}

template <class Real>
Checkpoint<Real> to_checkpoint(const Trainer<Real>& tr) {
    Checkpoint<Real> ck;
    ck.run = tr.run;
    ck.vocab = tr.vocab;
    for (const auto& s : tr.tagsets) ck.tagsets.push_back(s.tags());
    ck.params = tr.params;
    ck.head = tr.head;
    ck.adam_m = tr.adam_m;
    ck.adam_v = tr.adam_v;
    ck.adam_step = tr.adam_step_count;
    ck.epoch = tr.epoch_done;
    ck.rng_state = tr.rng.state();
    ck.best_metric = tr.best_metric;
    ck.has_best = tr.has_best;
    return ck;
}

// One optimizer step over a batch of sentence indices. Returns the mean
// task loss (with the L2 term added) or nullopt when every sentence was
// skipped.
template <class Real>
std::optional<double> train_batch(Trainer<Real>& tr, const Encoded& data,
                                  const std::vector<size_t>& batch) {
    const RunConfig& run = tr.run;
    tr.params.zero_grads();
    tr.head.zero_grads();

    // Stochastic choices are drawn up front from the single training
    // stream so results do not depend on thread interleaving.
    std::vector<std::optional<MaskedSentence>> masks(batch.size());
    std::vector<Tensor<Real>> dropout(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        if (run.task == "mlm")
            masks[b] = apply_mlm_mask(data.ids[batch[b]], run.mask_rate, tr.rng);
        if (run.model.dropout > 0) {
            const int64_t n = int64_t(data.ids[batch[b]].size());
            Tensor<Real> dm({n, run.model.d});
            const Real keep = Real(1) - Real(run.model.dropout);
            for (int64_t i = 0; i < dm.numel(); ++i)
                dm(i) = (tr.rng.uniform() < double(keep)) ? Real(1) / keep : Real(0);
            dropout[b] = std::move(dm);
        }
    }

    double loss_sum = 0.0;
    int64_t n_contrib = 0;
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (int64_t b = 0; b < int64_t(batch.size()); ++b) {
        try {
            const size_t s = batch[size_t(b)];
            if (masks[size_t(b)] && masks[size_t(b)]->n_masked == 0) continue;
            Tape<Real> tape;
            ParamNodes<Real> pn = bind_parameters(tape, tr.params);
            std::vector<typename Tape<Real>::Id> head_nodes;
            for (const auto& P : tr.head.P) head_nodes.push_back(tape.leaf(P));
            const std::vector<int64_t>& input =
                masks[size_t(b)] ? masks[size_t(b)]->input : data.ids[s];
            const Tensor<Real>* dm =
                run.model.dropout > 0 ? &dropout[size_t(b)] : nullptr;
            SentenceGraph<Real> g =
                run.model.path == EnginePath::TransformerForm
                    ? build_transformer_form_graph(tape, pn, run.model, input)
                    : build_inference_graph(tape, pn, run.model, tr.params.vocab_size, input, dm);
            typename Tape<Real>::Id loss = -1;
            if (run.task == "mlm") {
                loss = *mlm_loss_graph(tape, g.reps, head_nodes[0], *masks[size_t(b)]);
            } else if (run.task == "tagging" || run.task == "ner") {
                loss = tagging_loss_graph(tape, g.reps, head_nodes[0], data.tags[s], nullptr);
            } else if (run.task == "classification") {
                loss = classification_loss_graph(tape, g.root_rep, head_nodes[0], data.labels[s],
                                                 nullptr);
            } else {
                std::vector<std::vector<int64_t>> rows(data.cogs[s].begin(), data.cogs[s].end());
                loss = cogs_loss_graph(tape, g.reps, head_nodes, rows, nullptr);
            }
            tape.backward(loss);
#pragma omp critical(ptran_grad_accum)
            {
                accumulate_param_grads(tape, pn, tr.params);
                for (size_t t = 0; t < head_nodes.size(); ++t) {
                    Tensor<Real> hg = tape.grad(head_nodes[t]);
                    for (int64_t i = 0; i < hg.numel(); ++i) tr.head.g[t](i) += hg(i);
                }
                loss_sum += double(tape.value(loss)(0));
                ++n_contrib;
            }
        } catch (...) {
#pragma omp critical(ptran_grad_accum)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    if (n_contrib == 0) return std::nullopt;

    const Real inv = Real(1) / Real(n_contrib);
    auto slots = collect_slots(tr.params, tr.head);
    for (Tensor<Real>* g : slots.grads)
        for (int64_t i = 0; i < g->numel(); ++i) (*g)(i) *= inv;

    double total = loss_sum / double(n_contrib);
    if (run.l2_ternary > 0) {
        for (auto& [name, t] : tr.params.ternary_tensors()) {
            Tensor<Real>* g = nullptr;
            for (size_t i = 0; i < slots.names.size(); ++i)
                if (slots.names[i] == name) g = slots.grads[i];
            for (int64_t i = 0; i < t->numel(); ++i) {
                total += run.l2_ternary * double((*t)(i)) * double((*t)(i));
                (*g)(i) += Real(2 * run.l2_ternary) * (*t)(i);
            }
        }
    }
    adam_step(slots, tr.adam_m, tr.adam_v, tr.adam_step_count, run);
    return total;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string metric;
    double value = 0.0;
    int64_t n_items = 0;
};

template <class Real>
std::vector<MetricRow> evaluate(const Trainer<Real>& tr, const Encoded& data) {
    const RunConfig& run = tr.run;
    // Evaluation masking uses its own fixed-seed stream so the metric is a
    // pure function of (checkpoint, data).
    Rng eval_rng(run.seed * 7919 + 17);
    std::vector<std::optional<MaskedSentence>> masks(data.size());
    if (run.task == "mlm")
        for (size_t s = 0; s < data.size(); ++s)
            masks[s] = apply_mlm_mask(data.ids[s], run.mask_rate, eval_rng);

    double loss_weighted = 0.0;  // sum over items of per-item NLL
    int64_t items = 0, correct = 0, sentences_right = 0, sentences = 0;
    F1Counts f1;
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (int64_t s = 0; s < int64_t(data.size()); ++s) {
        try {
            if (masks[size_t(s)] && masks[size_t(s)]->n_masked == 0) continue;
            Tape<Real> tape;
            ParamNodes<Real> pn = bind_parameters(tape, tr.params);
            std::vector<typename Tape<Real>::Id> head_nodes;
            for (const auto& P : tr.head.P) head_nodes.push_back(tape.leaf(P));
            const std::vector<int64_t>& input =
                masks[size_t(s)] ? masks[size_t(s)]->input : data.ids[size_t(s)];
            SentenceGraph<Real> g =
                run.model.path == EnginePath::TransformerForm
                    ? build_transformer_form_graph(tape, pn, run.model, input)
                    : build_inference_graph(tape, pn, run.model, tr.params.vocab_size, input);
            int64_t sent_correct_tokens = 0;
            bool sent_all = false;
            typename Tape<Real>::Id loss = -1;
            int64_t sent_items = 0;
            std::vector<std::string> pred_tags;
            if (run.task == "mlm") {
                loss = *mlm_loss_graph(tape, g.reps, head_nodes[0], *masks[size_t(s)]);
                sent_items = masks[size_t(s)]->n_masked;
            } else if (run.task == "tagging" || run.task == "ner") {
                loss = tagging_loss_graph(tape, g.reps, head_nodes[0], data.tags[size_t(s)],
                                          &sent_correct_tokens);
                sent_items = int64_t(data.tags[size_t(s)].size());
                if (run.task == "ner") {
                    typename Tape<Real>::Id logits = tape.matmul(g.reps, head_nodes[0]);
                    const Tensor<Real>& v = tape.value(logits);
                    for (int64_t i = 0; i < v.dim(0); ++i) {
                        int64_t best = 0;
                        for (int64_t a = 1; a < v.dim(1); ++a)
                            if (v(i, a) > v(i, best)) best = a;
                        pred_tags.push_back(tr.tagsets.at(0).tag_of(best));
                    }
                }
            } else if (run.task == "classification") {
                loss = classification_loss_graph(tape, g.root_rep, head_nodes[0],
                                                 data.labels[size_t(s)], &sent_correct_tokens);
                sent_items = 1;
            } else {
                std::vector<std::vector<int64_t>> rows(data.cogs[size_t(s)].begin(),
                                                       data.cogs[size_t(s)].end());
                loss = cogs_loss_graph(tape, g.reps, head_nodes, rows, &sent_all);
                sent_items = int64_t(data.ids[size_t(s)].size());
            }
            const double lval = double(tape.value(loss)(0));
#pragma omp critical(ptran_eval_accum)
            {
                loss_weighted += lval * double(sent_items);
                items += sent_items;
                correct += sent_correct_tokens;
                ++sentences;
                if (sent_all) ++sentences_right;
                if (run.task == "ner") f1.add(pred_tags, data.tag_strings[size_t(s)]);
            }
        } catch (...) {
#pragma omp critical(ptran_eval_accum)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    require(items > 0, "evaluate: no scorable items (e.g. no masked tokens)");

    std::vector<MetricRow> out;
    const double mean_loss = loss_weighted / double(items);
    out.push_back({"loss", mean_loss, items});
    if (run.task == "mlm") {
        out.push_back({"perplexity", std::exp(mean_loss), items});
    } else if (run.task == "tagging") {
        out.push_back({"accuracy", double(correct) / double(items), items});
    } else if (run.task == "ner") {
        out.push_back({"accuracy", double(correct) / double(items), items});
        out.push_back({"f1", f1.f1(), f1.gold});
    } else if (run.task == "classification") {
        out.push_back({"accuracy", double(correct) / double(sentences), sentences});
    } else {
        out.push_back({"sentence_accuracy", double(sentences_right) / double(sentences),
                       sentences});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Runs epochs [epoch_done, run.epochs). Appends one JSON line per metric to
// log_out; keeps the best-validation checkpoint at run.checkpoint_path and
// the latest state (for resuming) at run.checkpoint_path + ".last".
template <class Real>
void train(Trainer<Real>& tr, const Encoded& train_data, const Encoded& valid_data,
           std::ostream* log_out = nullptr) {
    const RunConfig& run = tr.run;
    const auto t0 = std::chrono::steady_clock::now();
    auto wallclock = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    auto log_metric = [&](int64_t epoch, const std::string& split, const std::string& metric,
                          double value) {
        if (!log_out) return;
        nlohmann::json j = {{"epoch", epoch},
                            {"split", split},
                            {"metric", metric},
                            {"value", value},
                            {"wallclock_s", wallclock()}};
        *log_out << j.dump() << "\n" << std::flush;
    };

    if (run.epochs == 0 || tr.epoch_done == 0) {
        Checkpoint<Real> ck = to_checkpoint(tr);
        save_checkpoint(ck, run.checkpoint_path);
    }

    for (int64_t epoch = tr.epoch_done; epoch < run.epochs; ++epoch) {
        auto batches = make_batches(train_data.size(), run.batch_size, tr.rng);
        double loss_sum = 0.0;
        int64_t n_batches = 0;
        for (const auto& batch : batches) {
            std::optional<double> loss = train_batch(tr, train_data, batch);
            if (!loss) continue;
            if (!std::isfinite(*loss))
                throw Error("training diverged (non-finite loss) at epoch " +
                            std::to_string(epoch + 1) + "; last good checkpoint kept at " +
                            run.checkpoint_path);
            loss_sum += *loss;
            ++n_batches;
        }
        tr.epoch_done = epoch + 1;
        if (n_batches > 0) log_metric(epoch + 1, "train", "loss", loss_sum / double(n_batches));

        std::vector<MetricRow> metrics = evaluate(tr, valid_data);
        for (const auto& m : metrics) log_metric(epoch + 1, "valid", m.metric, m.value);

        double sel = 0.0;
        for (const auto& m : metrics)
            if (m.metric == tr.selection_metric()) sel = m.value;
        const bool improved = tr.lower_is_better() ? sel < tr.best_metric : sel > tr.best_metric;
        if (improved || !tr.has_best) {
            tr.best_metric = sel;
            tr.has_best = true;
            Checkpoint<Real> ck = to_checkpoint(tr);
            save_checkpoint(ck, run.checkpoint_path);
        }
        Checkpoint<Real> last = to_checkpoint(tr);
        save_checkpoint(last, run.checkpoint_path + ".last");
    }
}

}  // namespace ptran
