#pragma once

#include <stdexcept>
#include <string>

namespace clm {

// Bad user-supplied data (text outside the alphabet, ids out of range).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (e.g. S2S requested in PT phase).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Token stream does not follow the segment grammar.
class MalformedSequence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values surfaced during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint file problems, one class per failure kind.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CorruptCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace clm
