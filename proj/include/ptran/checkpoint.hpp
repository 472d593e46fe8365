#pragma once

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>
#include "json.hpp"

#include "ptran/data.hpp"
#include "ptran/model.hpp"
#include "ptran/tasks.hpp"

namespace ptran {

// On-disk layout: magic "PTCK", u32 format version, u64 JSON header length,
// JSON header, then raw little-endian tensor payloads back to back. The
// header records the run config, vocabulary, tag inventories, the tensor
// directory (name/dtype/shape/offset/length), the RNG algorithm and state,
// the optimizer step count, and a CRC32 of the whole payload block.

inline constexpr char kCkptMagic[4] = {'P', 'T', 'C', 'K'};
inline constexpr uint32_t kCkptVersion = 1;

template <class Real>
struct Checkpoint {
    RunConfig run;
    Vocab vocab;
    std::vector<std::vector<std::string>> tagsets;  // target inventories, in head order
    Parameters<Real> params;
    TaskHead<Real> head;
    // Adam moments parallel to the trainable list (model tensors then head
    // tensors); empty when the checkpoint carries no optimizer state.
    std::vector<Tensor<Real>> adam_m, adam_v;
    int64_t adam_step = 0;
    int64_t epoch = 0;
    std::array<uint64_t, 4> rng_state{};
    double best_metric = 0.0;
    bool has_best = false;
};

namespace detail {

template <class Real>
const char* dtype_name() {
    if constexpr (std::is_same_v<Real, float>) return "f32";
    else return "f64";
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts unsupported");

template <class Real>
void collect_entries(Checkpoint<Real>& ck,
                     std::vector<std::pair<std::string, Tensor<Real>*>>& out) {
    for (auto& [name, t] : ck.params.named_tensors()) out.emplace_back(name, t);
    for (size_t i = 0; i < ck.head.P.size(); ++i) out.emplace_back(ck.head.names[i], &ck.head.P[i]);
    for (size_t i = 0; i < ck.adam_m.size(); ++i) {
        out.emplace_back("adam.m." + std::to_string(i), &ck.adam_m[i]);
        out.emplace_back("adam.v." + std::to_string(i), &ck.adam_v[i]);
    }
}

}  // namespace detail

template <class Real>
void save_checkpoint(Checkpoint<Real>& ck, const std::string& path) {
    std::vector<std::pair<std::string, Tensor<Real>*>> entries;
    detail::collect_entries(ck, entries);

    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (auto& [name, t] : entries) {
        const uint64_t bytes = uint64_t(t->numel()) * sizeof(Real);
        dir.push_back({{"name", name},
                       {"dtype", detail::dtype_name<Real>()},
                       {"shape", t->shape},
                       {"offset", offset},
                       {"length", bytes}});
        offset += bytes;
    }
    uLong crc = crc32(0L, Z_NULL, 0);
    for (auto& [name, t] : entries)
        crc = crc32(crc, reinterpret_cast<const Bytef*>(t->data.data()),
                    uInt(t->data.size() * sizeof(Real)));

    nlohmann::json header = {{"config", ck.run},
                             {"vocab", ck.vocab.tokens()},
                             {"tagsets", ck.tagsets},
                             {"task_kind", ck.head.kind},
                             {"tensors", dir},
                             {"rng", {{"algorithm", Rng::kAlgorithmId}, {"state", ck.rng_state}}},
                             {"adam_step", ck.adam_step},
                             {"epoch", ck.epoch},
                             // sentinel +/-inf (no best yet) is not representable in JSON
                             {"best_metric", ck.has_best ? ck.best_metric : 0.0},
                             {"has_best", ck.has_best},
                             {"crc32", uint32_t(crc)}};
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(kCkptMagic, 4);
    const uint32_t ver = kCkptVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), std::streamsize(hs.size()));
    for (auto& [name, t] : entries)
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  std::streamsize(t->data.size() * sizeof(Real)));
    if (!out) throw IoError("write failed: " + path);
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    uint32_t ver = 0;
    uint64_t hlen = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw CorruptCheckpoint(path + ": bad magic");
    if (ver != kCkptVersion)
        throw CorruptCheckpoint(path + ": unsupported format version " + std::to_string(ver));
    std::string hs(hlen, '\0');
    in.read(hs.data(), std::streamsize(hlen));
    if (!in) throw CorruptCheckpoint(path + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(path + ": invalid header JSON: " + e.what());
    }

    Checkpoint<Real> ck;
    ck.run = header.at("config").get<RunConfig>();
    ck.run.model.validate();
    std::vector<std::string> toks = header.at("vocab").get<std::vector<std::string>>();
    for (size_t i = 3; i < toks.size(); ++i) ck.vocab.add(toks[i]);  // 0..2 reserved
    ck.tagsets = header.at("tagsets").get<std::vector<std::vector<std::string>>>();
    ck.adam_step = header.value("adam_step", int64_t(0));
    ck.epoch = header.value("epoch", int64_t(0));
    if (header.contains("best_metric") && header["best_metric"].is_number())
        ck.best_metric = header["best_metric"].get<double>();
    ck.has_best = header.value("has_best", false);
    const auto& rng = header.at("rng");
    if (rng.at("algorithm").get<std::string>() != Rng::kAlgorithmId)
        throw CorruptCheckpoint(path + ": unknown RNG algorithm");
    ck.rng_state = rng.at("state").get<std::array<uint64_t, 4>>();

    ck.params = shaped_parameters<Real>(ck.run.model, ck.vocab.size());
    ck.head.kind = header.at("task_kind").get<std::string>();

    // Read payload and verify before distributing.
    std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size()));
    if (uint32_t(crc) != header.at("crc32").get<uint32_t>())
        throw CorruptCheckpoint(path + ": payload checksum mismatch");

    auto model_slots = ck.params.named_tensors();
    auto find_model = [&](const std::string& name) -> Tensor<Real>* {
        for (auto& [n, t] : model_slots)
            if (n == name) return t;
        return nullptr;
    };
    std::vector<bool> model_seen(model_slots.size(), false);
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        if (e.at("dtype").get<std::string>() != detail::dtype_name<Real>())
            throw CorruptCheckpoint(path + ": tensor " + name + " has dtype " +
                                    e.at("dtype").get<std::string>() + ", expected " +
                                    detail::dtype_name<Real>());
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        const uint64_t off = e.at("offset").get<uint64_t>();
        const uint64_t len = e.at("length").get<uint64_t>();
        if (off + len > payload.size()) throw CorruptCheckpoint(path + ": tensor " + name +
                                                                " extends past payload");
        Tensor<Real> t(shape);
        if (uint64_t(t.numel()) * sizeof(Real) != len)
            throw CorruptCheckpoint(path + ": tensor " + name + " length/shape mismatch");
        std::memcpy(t.data.data(), payload.data() + off, len);

        if (Tensor<Real>* slot = find_model(name)) {
            if (!slot->same_shape(t))
                throw CorruptCheckpoint(path + ": tensor " + name + " has shape " + t.shape_str() +
                                        ", config expects " + slot->shape_str());
            *slot = std::move(t);
            for (size_t i = 0; i < model_slots.size(); ++i)
                if (model_slots[i].first == name) model_seen[i] = true;
        } else if (name.rfind("head.P", 0) == 0) {
            ck.head.names.push_back(name);
            ck.head.P.push_back(std::move(t));
        } else if (name.rfind("adam.m.", 0) == 0) {
            ck.adam_m.push_back(std::move(t));
        } else if (name.rfind("adam.v.", 0) == 0) {
            ck.adam_v.push_back(std::move(t));
        } else {
            throw CorruptCheckpoint(path + ": unexpected tensor " + name);
        }
    }
    for (size_t i = 0; i < model_slots.size(); ++i)
        if (!model_seen[i])
            throw CorruptCheckpoint(path + ": missing tensor " + model_slots[i].first);
    for (auto& t : ck.head.P) ck.head.g.push_back(Tensor<Real>(t.shape));
    return ck;
}

}  // namespace ptran
