// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gtca/util/errors.hpp"

namespace gtca {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class TruncatedInput : public InputError {
public:
    using InputError::InputError;
};

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }

    void put_bytes(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }

    /// u32 length prefix followed by the raw characters.
    void put_string(std::string_view text) {
        put(static_cast<std::uint32_t>(text.size()));
        bytes_.insert(bytes_.end(), text.begin(), text.end());
    }

    const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
    std::vector<std::uint8_t> take() noexcept { return std::move(bytes_); }
    std::size_t size() const noexcept { return bytes_.size(); }

private:
    std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian reader over a byte span.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    template <typename T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        require(sizeof(T));
        T value;
        std::memcpy(&value, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::span<const std::uint8_t> get_bytes(std::size_t n) {
        require(n);
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    std::string get_string() {
        const auto n = get<std::uint32_t>();
        auto raw = get_bytes(n);
        return {reinterpret_cast<const char*>(raw.data()), raw.size()};
    }

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    bool at_end() const noexcept { return pos_ == data_.size(); }

private:
    void require(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw TruncatedInput("unexpected end of data at byte " + std::to_string(pos_) + " (need " +
                                 std::to_string(n) + ", have " + std::to_string(data_.size() - pos_) + ")");
        }
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);
std::string read_file_text(const std::string& path);

}  // namespace gtca
