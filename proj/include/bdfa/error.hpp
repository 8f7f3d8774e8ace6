#pragma once

#include <stdexcept>
#include <string>

namespace bdfa {

// Base for every error raised by the library. `kind()` is a short stable tag
// used by the CLI for its single-line error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define BDFA_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

BDFA_DEFINE_ERROR(ShapeError, "shape error")
BDFA_DEFINE_ERROR(NonFiniteError, "non-finite error")
BDFA_DEFINE_ERROR(AutodiffError, "autodiff error")
BDFA_DEFINE_ERROR(ConfigError, "config error")
BDFA_DEFINE_ERROR(FormatError, "format error")
BDFA_DEFINE_ERROR(VersionError, "version error")
BDFA_DEFINE_ERROR(TruncatedError, "truncated error")
BDFA_DEFINE_ERROR(ChecksumError, "checksum error")
BDFA_DEFINE_ERROR(ConsistencyError, "consistency error")
BDFA_DEFINE_ERROR(IoError, "io error")
BDFA_DEFINE_ERROR(QuantizationError, "quantization error")
BDFA_DEFINE_ERROR(DistillError, "distill error")
BDFA_DEFINE_ERROR(DivergenceError, "divergence error")
BDFA_DEFINE_ERROR(StallError, "attack stalled")
BDFA_DEFINE_ERROR(DatasetError, "dataset error")
BDFA_DEFINE_ERROR(StateError, "state error")

#undef BDFA_DEFINE_ERROR

// Raised by model forward when an activation becomes NaN/Inf; carries the
// index of the offending layer.
class LayerNonFiniteError : public NonFiniteError {
 public:
  LayerNonFiniteError(std::size_t layer, const std::string& what)
      : NonFiniteError(what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

}  // namespace bdfa
