// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by every xstr module.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xstr {

enum class ErrorCode {
  // corpus
  EmptyText,
  UnknownSymbol,
  BadSpec,
  VocabClash,
  MissingFile,
  UndecodableImage,
  // numerics / model
  ShapeMismatch,
  BadStride,
  NumericalError,
  OddDim,
  // training
  EmptyDataset,
  DivergedLoss,
  IncompatibleShapes,
  VocabMismatch,
  BadCheckpoint,
  // harness
  LengthMismatch,
  EmptySet,
  BadSize,
  ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::UnknownSymbol: return "UnknownSymbol";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::VocabClash: return "VocabClash";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::UndecodableImage: return "UndecodableImage";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadStride: return "BadStride";
    case ErrorCode::NumericalError: return "NumericalError";
    case ErrorCode::OddDim: return "OddDim";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::IncompatibleShapes: return "IncompatibleShapes";
    case ErrorCode::VocabMismatch: return "VocabMismatch";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::BadSize: return "BadSize";
    case ErrorCode::ConfigError: return "ConfigError";
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

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace xstr
