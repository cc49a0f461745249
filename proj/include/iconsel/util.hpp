#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace iconsel {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

/// 64-bit FNV-1a. Stable across platforms, unlike std::hash.
constexpr std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Engine seeded from the SHA-256 of the joined parts, so every
/// (seed, name, index) triple gets an independent, reproducible stream.
std::mt19937_64 seeded_engine(std::initializer_list<std::string_view> parts);

/// Uniform integer in [0, n). Rejection sampling on the raw engine output;
/// std::uniform_int_distribution is implementation-defined and would make
/// draws differ between standard libraries.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

/// Uniform real in [0, 1) with 53 random bits.
double uniform_unit(std::mt19937_64& rng);

/// Partial Fisher-Yates: the first k entries of a random permutation of 0..n-1.
std::vector<std::size_t> sample_without_replacement(std::mt19937_64& rng, std::size_t n, std::size_t k);

std::vector<std::string> split_whitespace(std::string_view text);

std::string_view trim(std::string_view s);

/// ceil(m * percent / 100), with products within 1e-9 of an integer snapped
/// to that integer so that e.g. 100 * 15% is 15, not 16.
std::size_t subset_size(std::size_t m, double percent);

/// Shortest round-trip decimal used for CSV and text outputs.
std::string format_double(double v);

/// RFC 4180 quoting, applied only when the field needs it.
std::string csv_escape(std::string_view field);

/// Whole-file read; throws DataError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and rename, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace iconsel
