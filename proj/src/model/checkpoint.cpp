// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/model/checkpoint.hpp"

#include <cstring>
#include <map>

#include "gtca/util/bytes.hpp"
#include "gtca/util/hash.hpp"

namespace gtca::model {

namespace {

constexpr char kMagic[4] = {'G', 'T', 'C', 'A'};

template <typename T>
constexpr std::uint8_t dtype_code() {
    return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
std::vector<const num::Parameter<T>*> all_parameters(const Transformer<T>& model) {
    auto out = model.backbone_parameters();
    for (const auto* p : model.lora_parameters()) out.push_back(p);
    for (const auto* p : model.structural_parameters()) out.push_back(p);
    return out;
}

void put_crc_block(ByteWriter& out, const std::vector<std::uint8_t>& block) {
    out.put(static_cast<std::uint32_t>(block.size()));
    out.put_bytes(block);
    out.put(crc32(block));
}

std::span<const std::uint8_t> get_crc_block(ByteReader& in, const std::string& what) {
    const auto len = in.get<std::uint32_t>();
    auto block = in.get_bytes(len);
    const auto stored = in.get<std::uint32_t>();
    if (crc32(block) != stored) throw ChecksumError("checkpoint: checksum mismatch in " + what);
    return block;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Transformer<T>& model) {
    const ModelConfig& c = model.config();
    ByteWriter header;
    for (const auto v : {c.vocab, c.d_model, c.layers, c.heads, c.head_dim, c.max_len, c.mlp_ratio}) {
        header.put(static_cast<std::uint64_t>(v));
    }
    header.put_string(c.position);
    header.put(dtype_code<T>());
    const auto& adapters = model.adapters();
    const std::uint64_t rank = adapters.empty() ? 0 : adapters.begin()->second.rank;
    const double alpha = adapters.empty() ? 0.0 : adapters.begin()->second.alpha;
    header.put(rank);
    header.put(alpha);
    header.put(static_cast<std::uint32_t>(adapters.size()));
    for (const auto& [name, ad] : adapters) {
        if (ad.rank != rank || ad.alpha != alpha) throw InputError("checkpoint: adapters with mixed rank/alpha");
        header.put_string(name);
    }
    header.put(static_cast<std::uint8_t>(model.has_structural_branch() ? 1 : 0));
    if (model.has_structural_branch()) {
        const auto& bc = model.structural_branch().config;
        header.put(static_cast<std::uint64_t>(bc.d_model));
        header.put(static_cast<std::uint64_t>(bc.layers));
        header.put(static_cast<std::uint64_t>(bc.heads));
        header.put(static_cast<std::uint32_t>(bc.max_height));
        header.put(static_cast<std::uint64_t>(bc.max_chunks));
    }

    ByteWriter out;
    out.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
    out.put(kCheckpointVersion);
    put_crc_block(out, header.bytes());
    const auto params = all_parameters(model);
    out.put(static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        ByteWriter s;
        s.put_string(p->name);
        s.put(dtype_code<T>());
        s.put(static_cast<std::uint32_t>(p->value.rank()));
        for (const auto d : p->value.shape()) s.put(static_cast<std::uint64_t>(d));
        s.put_bytes({reinterpret_cast<const std::uint8_t*>(p->value.data().data()), p->value.size() * sizeof(T)});
        put_crc_block(out, s.bytes());
    }
    return out.take();
}

template <typename T>
Transformer<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    const auto magic = in.get_bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw InputError("checkpoint: bad magic");
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointVersionError("checkpoint: version " + std::to_string(version) + " (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    }
    ByteReader h(get_crc_block(in, "header"));
    ModelConfig c;
    c.vocab = h.get<std::uint64_t>();
    c.d_model = h.get<std::uint64_t>();
    c.layers = h.get<std::uint64_t>();
    c.heads = h.get<std::uint64_t>();
    c.head_dim = h.get<std::uint64_t>();
    c.max_len = h.get<std::uint64_t>();
    c.mlp_ratio = h.get<std::uint64_t>();
    c.position = h.get_string();
    if (h.get<std::uint8_t>() != dtype_code<T>()) throw InputError("checkpoint: scalar type mismatch");
    const auto rank = h.get<std::uint64_t>();
    const auto alpha = h.get<double>();
    const auto n_adapters = h.get<std::uint32_t>();
    std::vector<std::string> targets;
    for (std::uint32_t i = 0; i < n_adapters; ++i) targets.push_back(h.get_string());
    const bool has_branch = h.get<std::uint8_t>() != 0;
    branch::BranchConfig bc;
    if (has_branch) {
        bc.d_model = h.get<std::uint64_t>();
        bc.layers = h.get<std::uint64_t>();
        bc.heads = h.get<std::uint64_t>();
        bc.max_height = h.get<std::uint32_t>();
        bc.max_chunks = h.get<std::uint64_t>();
    }
    if (!h.at_end()) throw InputError("checkpoint: trailing bytes in header");

    Transformer<T> model(c, 0);
    if (!targets.empty()) model.lora_wrap(targets, rank, alpha, 0);
    if (has_branch) model.attach_structural_branch(branch::StructuralBranch<T>(bc, 0));

    std::map<std::string, num::Parameter<T>*> by_name;
    for (auto* p : model.backbone_parameters()) by_name[p->name] = p;
    for (auto* p : model.lora_parameters()) by_name[p->name] = p;
    for (auto* p : model.structural_parameters()) by_name[p->name] = p;

    const auto count = in.get<std::uint32_t>();
    if (count != by_name.size()) {
        throw InputError("checkpoint: " + std::to_string(count) + " tensor sections, expected " +
                         std::to_string(by_name.size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        ByteReader s(get_crc_block(in, "section " + std::to_string(i)));
        const std::string name = s.get_string();
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw InputError("checkpoint: unexpected tensor '" + name + "'");
        if (s.get<std::uint8_t>() != dtype_code<T>()) throw InputError("checkpoint: dtype mismatch for " + name);
        num::Shape shape(s.get<std::uint32_t>());
        for (auto& d : shape) d = s.get<std::uint64_t>();
        num::Tensor<T>& dst = it->second->value;
        if (shape != dst.shape()) {
            throw InputError("checkpoint: tensor " + name + " has shape " + num::shape_to_string(shape) +
                             ", expected " + num::shape_to_string(dst.shape()));
        }
        const auto raw = s.get_bytes(dst.size() * sizeof(T));
        std::memcpy(dst.data().data(), raw.data(), raw.size());
        if (!s.at_end()) throw InputError("checkpoint: trailing bytes in tensor " + name);
        by_name.erase(it);
    }
    if (!in.at_end()) throw InputError("checkpoint: trailing bytes after last section");
    return model;
}

template <typename T>
void save_checkpoint(const Transformer<T>& model, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(model);
    write_file_bytes(path.string(), bytes);
}

template <typename T>
Transformer<T> load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path.string());
    return deserialize_checkpoint<T>(bytes);
}

template std::vector<std::uint8_t> serialize_checkpoint<float>(const Transformer<float>&);
template std::vector<std::uint8_t> serialize_checkpoint<double>(const Transformer<double>&);
template Transformer<float> deserialize_checkpoint<float>(std::span<const std::uint8_t>);
template Transformer<double> deserialize_checkpoint<double>(std::span<const std::uint8_t>);
template void save_checkpoint<float>(const Transformer<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Transformer<double>&, const std::filesystem::path&);
template Transformer<float> load_checkpoint<float>(const std::filesystem::path&);
template Transformer<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace gtca::model
