#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fvae/adam.hpp"
#include "fvae/model.hpp"
#include "fvae/rng.hpp"

namespace fvae {

// Portable binary checkpoint:
//   "FVAE" | u32 version | u32 phase | u32 entry count
//   per entry: u32 name len | name | u8 dtype | u8 rank | i64 dims | payload
//   trailing u32 CRC-32 of all preceding bytes
// All integers and payloads little-endian.
enum class CkptDtype : uint8_t { f32 = 0, f64 = 1, u64 = 2 };

struct CheckpointEntry {
    std::string name;
    CkptDtype dtype = CkptDtype::f32;
    std::vector<int64_t> dims;
    std::vector<uint8_t> bytes;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

struct CheckpointFile {
    uint32_t version = 1;
    uint32_t phase = 0;
    std::vector<CheckpointEntry> entries;

    void write(const std::string& path) const;  // temp file + atomic rename
    static CheckpointFile read(const std::string& path);

    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
    const CheckpointEntry& require(const std::string& name) const {
        const CheckpointEntry* e = find(name);
        if (!e) throw std::runtime_error("checkpoint: missing entry '" + name + "'");
        return *e;
    }
};

uint32_t crc32_ieee(const uint8_t* data, size_t len, uint32_t seed = 0);

// ---- entry conversion helpers ------------------------------------------------

namespace detail {

template <typename T>
constexpr CkptDtype dtype_of() {
    return sizeof(T) == 4 ? CkptDtype::f32 : CkptDtype::f64;
}

inline void put_u64_le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline uint64_t get_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

template <typename T>
CheckpointEntry entry_from_tensor(const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e;
    e.name = name;
    e.dtype = detail::dtype_of<T>();
    e.dims = t.shape;
    e.bytes.resize(t.data.size() * sizeof(T));
    std::memcpy(e.bytes.data(), t.data.data(), e.bytes.size());
    return e;
}

template <typename T>
void tensor_from_entry(const CheckpointEntry& e, Tensor<T>& out) {
    if (e.dtype != detail::dtype_of<T>())
        throw std::runtime_error("checkpoint: dtype mismatch for entry '" + e.name +
                                 "' (model precision differs from file)");
    if (e.dims != out.shape)
        throw std::runtime_error("checkpoint: shape mismatch for entry '" + e.name + "': file " +
                                 shape_str(e.dims) + " vs config " + shape_str(out.shape));
    std::memcpy(out.data.data(), e.bytes.data(), e.bytes.size());
}

inline CheckpointEntry entry_from_u64(const std::string& name, const std::vector<uint64_t>& vals) {
    CheckpointEntry e;
    e.name = name;
    e.dtype = CkptDtype::u64;
    e.dims = {static_cast<int64_t>(vals.size())};
    for (uint64_t v : vals) detail::put_u64_le(e.bytes, v);
    return e;
}

inline std::vector<uint64_t> u64_from_entry(const CheckpointEntry& e) {
    if (e.dtype != CkptDtype::u64)
        throw std::runtime_error("checkpoint: dtype mismatch for entry '" + e.name + "'");
    std::vector<uint64_t> out;
    for (int64_t i = 0; i < e.count(); ++i)
        out.push_back(detail::get_u64_le(e.bytes.data() + i * 8));
    return out;
}

// ---- model persistence ---------------------------------------------------------

// Saves every named parameter plus the side state needed for exact resume:
// actnorm init flags, 1x1 permutations/signs, optimizer moments, RNG state,
// and the epoch counter.
template <typename T>
void save_checkpoint(HybridModel<T>& model, const std::string& path, Adam<T>* opt = nullptr,
                     RngStream* rng = nullptr, int64_t epoch = 0) {
    CheckpointFile f;
    f.phase = static_cast<uint32_t>(model.phase);
    model.visit_params([&](const std::string& name, Parameter<T>& p) {
        f.entries.push_back(entry_from_tensor("param/" + name, p.value));
    });
    for (size_t i = 0; i < model.pixel_flow.layers.size(); ++i) {
        FlowLayer<T>* l = model.pixel_flow.layers[i].get();
        const std::string tag = "glow." + std::to_string(i);
        if (auto* an = dynamic_cast<ActNorm<T>*>(l))
            f.entries.push_back(entry_from_u64("flag/" + tag + ".actnorm_init",
                                               {an->initialized ? 1ull : 0ull}));
        if (auto* inv = dynamic_cast<Inv1x1<T>*>(l)) {
            std::vector<uint64_t> perm(inv->perm.begin(), inv->perm.end());
            f.entries.push_back(entry_from_u64("fixed/" + tag + ".perm", perm));
            f.entries.push_back(entry_from_tensor("fixed/" + tag + ".sign", inv->sign));
        }
    }
    if (opt) {
        model.visit_params([&](const std::string& name, Parameter<T>& p) {
            (void)p;
            if (Tensor<T>* m = opt->moment_m(name))
                f.entries.push_back(entry_from_tensor("opt/m/" + name, *m));
            if (Tensor<T>* v = opt->moment_v(name))
                f.entries.push_back(entry_from_tensor("opt/v/" + name, *v));
        });
        f.entries.push_back(entry_from_u64("opt/step", {static_cast<uint64_t>(opt->step_count())}));
    }
    if (rng) {
        f.entries.push_back(entry_from_u64("rng/seed", {rng->seed()}));
        f.entries.push_back(entry_from_u64("rng/counter", {rng->counter()}));
    }
    f.entries.push_back(entry_from_u64("train/epoch", {static_cast<uint64_t>(epoch)}));
    f.write(path);
}

// Fills a config-constructed model from a checkpoint. Returns the stored
// epoch counter. opt/rng are restored when present in the file.
template <typename T>
int64_t load_checkpoint(HybridModel<T>& model, const std::string& path, Adam<T>* opt = nullptr,
                        RngStream* rng = nullptr) {
    CheckpointFile f = CheckpointFile::read(path);
    model.phase = static_cast<Phase>(f.phase);
    model.visit_params([&](const std::string& name, Parameter<T>& p) {
        tensor_from_entry(f.require("param/" + name), p.value);
        p.zero_grad();
    });
    for (size_t i = 0; i < model.pixel_flow.layers.size(); ++i) {
        FlowLayer<T>* l = model.pixel_flow.layers[i].get();
        const std::string tag = "glow." + std::to_string(i);
        if (auto* an = dynamic_cast<ActNorm<T>*>(l))
            an->initialized = u64_from_entry(f.require("flag/" + tag + ".actnorm_init"))[0] != 0;
        if (auto* inv = dynamic_cast<Inv1x1<T>*>(l)) {
            std::vector<uint64_t> perm = u64_from_entry(f.require("fixed/" + tag + ".perm"));
            if (perm.size() != inv->perm.size())
                throw std::runtime_error("checkpoint: shape mismatch for entry '" + tag +
                                         ".perm' vs config");
            inv->perm.assign(perm.begin(), perm.end());
            tensor_from_entry(f.require("fixed/" + tag + ".sign"), inv->sign);
        }
    }
    if (opt) {
        model.visit_params([&](const std::string& name, Parameter<T>& p) {
            const CheckpointEntry* m = f.find("opt/m/" + name);
            const CheckpointEntry* v = f.find("opt/v/" + name);
            if (m && v) {
                Tensor<T> mt(p.value.shape), vt(p.value.shape);
                tensor_from_entry(*m, mt);
                tensor_from_entry(*v, vt);
                opt->set_moments(name, std::move(mt), std::move(vt));
            }
        });
        if (const CheckpointEntry* s = f.find("opt/step"))
            opt->set_step_count(static_cast<int64_t>(u64_from_entry(*s)[0]));
    }
    if (rng) {
        if (const CheckpointEntry* s = f.find("rng/seed"))
            *rng = RngStream(u64_from_entry(*s)[0], u64_from_entry(f.require("rng/counter"))[0]);
    }
    return static_cast<int64_t>(u64_from_entry(f.require("train/epoch"))[0]);
}

}  // namespace fvae
