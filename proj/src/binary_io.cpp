// Copyright 2026 The tfup Authors
// SPDX-License-Identifier: Apache-2.0

#include "tfup/binary_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "tfup/errors.hpp"

namespace tfup::io {

void ByteWriter::magic(std::string_view m) { bytes(m); }

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) throw FormatError("truncated payload", pos_);
}

void ByteReader::expect_magic(std::string_view m, std::string_view format) {
  if (remaining() < m.size() ||
      !std::equal(m.begin(), m.end(), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_))) {
    throw FormatError("bad magic: expected " + std::string(format) + " file starting with '" +
                          std::string(m) + "'",
                      pos_);
  }
  pos_ += m.size();
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::span<const unsigned char> ByteReader::take(std::size_t n) {
  need(n);
  auto out = bytes_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::vector<std::string> read_id_block(ByteReader& r, std::size_t rows) {
  std::vector<std::string> ids;
  ids.reserve(rows);
  std::string current;
  const std::size_t start = r.offset();
  auto rest = r.take(r.remaining());
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const unsigned char c = rest[i];
    if (c != '\n') {
      current.push_back(static_cast<char>(c));
      continue;
    }
    if (ids.size() == rows) {
      throw FormatError("id block has more entries than rows", start + i);
    }
    ids.push_back(std::move(current));
    current.clear();
  }
  if (!current.empty()) {
    throw FormatError("id block not newline-terminated", start + rest.size());
  }
  if (ids.size() != rows) {
    throw FormatError("id block has " + std::to_string(ids.size()) + " ids for " +
                          std::to_string(rows) + " rows",
                      start + rest.size());
  }
  return ids;
}

void write_id_block(ByteWriter& w, const std::vector<std::string>& ids) {
  for (const auto& id : ids) {
    w.bytes(id);
    w.bytes("\n");
  }
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace tfup::io
