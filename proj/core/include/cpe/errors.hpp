#pragma once

#include <stdexcept>
#include <string>

namespace cpe {

// Every failure the library can raise, grouped by the CLI exit code it maps to.
enum class ErrorKind {
  // configuration problems -> exit 1
  BadConfig,
  MissingColumn,
  UnknownPolicy,
  UnknownEstimand,
  UnknownEstimator,
  UnknownLearner,
  // data problems -> exit 2
  EmptyDataset,
  RaggedCluster,
  NonBinaryTreatment,
  ClusterTooLarge,
  UnparsableCell,
  IoFailure,
  // estimation problems -> exit 3
  TooFewClusters,
  DomainError,
  DegenerateDenominator,
  SingularFit,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::BadConfig:
    case ErrorKind::MissingColumn:
    case ErrorKind::UnknownPolicy:
    case ErrorKind::UnknownEstimand:
    case ErrorKind::UnknownEstimator:
    case ErrorKind::UnknownLearner:
      return 1;
    case ErrorKind::EmptyDataset:
    case ErrorKind::RaggedCluster:
    case ErrorKind::NonBinaryTreatment:
    case ErrorKind::ClusterTooLarge:
    case ErrorKind::UnparsableCell:
    case ErrorKind::IoFailure:
      return 2;
    default:
      return 3;
  }
}

}  // namespace cpe
