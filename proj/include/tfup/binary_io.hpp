// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tfup::io {

// Little-endian byte sink.
class ByteWriter {
 public:
  void magic(std::string_view m);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(std::string_view s);

  const std::vector<unsigned char>& buffer() const noexcept { return buf_; }
  std::vector<unsigned char> take() { return std::move(buf_); }

 private:
  std::vector<unsigned char> buf_;
};

// Little-endian byte source; every read past the end throws
// FormatError("truncated payload") with the failing offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  // Throws FormatError naming `format` when the leading bytes differ from `m`.
  void expect_magic(std::string_view m, std::string_view format);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::span<const unsigned char> take(std::size_t n);

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

// Decodes `rows` newline-terminated ids filling the rest of the buffer.
std::vector<std::string> read_id_block(ByteReader& r, std::size_t rows);
void write_id_block(ByteWriter& w, const std::vector<std::string>& ids);

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);

}  // namespace tfup::io
