#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>

#include <Eigen/Dense>

namespace arm3d {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ErrorCode {
  // data / input
  MalformedRow,
  DuplicateKey,
  MissingColumn,
  MissingCaseData,
  DegenerateFeature,
  GapInSeries,
  InvalidConfig,
  HorizonTooLong,
  ConstantVector,
  LengthMismatch,
  InsufficientHistory,
  MissingTargets,
  WindowTooLong,
  NoWindows,
  ZeroDenominator,
  AlignmentError,
  CheckpointMismatch,
  IoError,
  // programming / numeric
  ShapeMismatch,
  GraphNotRecorded,
  NonFiniteLoss,
  Usage,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::DuplicateKey: return "DuplicateKey";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::MissingCaseData: return "MissingCaseData";
    case ErrorCode::DegenerateFeature: return "DegenerateFeature";
    case ErrorCode::GapInSeries: return "GapInSeries";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::HorizonTooLong: return "HorizonTooLong";
    case ErrorCode::ConstantVector: return "ConstantVector";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::MissingTargets: return "MissingTargets";
    case ErrorCode::WindowTooLong: return "WindowTooLong";
    case ErrorCode::NoWindows: return "NoWindows";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::AlignmentError: return "AlignmentError";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::GraphNotRecorded: return "GraphNotRecorded";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::Usage: return "Usage";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Process exit code for an error: 1 usage, 2 data, 3 numeric failure.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Usage:
    case ErrorCode::InvalidConfig:
      return 1;
    case ErrorCode::NonFiniteLoss:
      return 3;
    default:
      return 2;
  }
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// splitmix64 finalizer; used to fan one top-level seed out into independent streams.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                 std::uint64_t index = 0) {
  std::uint64_t h = mix_seed(seed);
  for (unsigned char ch : stream) h = mix_seed(h ^ ch);
  return mix_seed(h ^ mix_seed(index + 1));
}

/// Shortest decimal text that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline bool parse_int(std::string_view s, long long& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace arm3d
