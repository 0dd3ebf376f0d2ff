// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/util/hash.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <stdexcept>

#include "gtca/util/rng.hpp"

namespace gtca {

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t state) {
    for (const std::uint8_t b : bytes) {
        state ^= b;
        state *= kFnv64Prime;
    }
    return state;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t state) {
    return fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}, state);
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
        crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace {

std::string digest_hex(const EVP_MD* md, std::span<const std::uint8_t> prefix, std::span<const std::uint8_t> bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr) throw std::runtime_error("EVP_MD_CTX_new failed");
    const bool ok = EVP_DigestInit_ex(ctx, md, nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, prefix.data(), prefix.size()) == 1 &&
                    EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, out.data(), &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("digest computation failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        hex.push_back(kHex[out[i] >> 4]);
        hex.push_back(kHex[out[i] & 0xF]);
    }
    return hex;
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) { return digest_hex(EVP_sha256(), {}, bytes); }

std::string sha256_hex(std::string_view bytes) {
    return sha256_hex({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
}

std::string git_blob_sha1(std::string_view content) {
    std::string header = "blob " + std::to_string(content.size());
    header.push_back('\0');
    return digest_hex(EVP_sha1(), {reinterpret_cast<const std::uint8_t*>(header.data()), header.size()},
                      {reinterpret_cast<const std::uint8_t*>(content.data()), content.size()});
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    // splitmix64 finalizer over (seed, fnv(label)).
    std::uint64_t z = seed ^ fnv1a64(label);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace gtca
