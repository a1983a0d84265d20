#pragma once

#include <stdexcept>
#include <string>

namespace dale {

enum class Errc {
  NonSymmetric,
  NonConvergent,
  NotScalarLoss,
  DetachedNode,
  BadRange,
  NonFinite,
  ShapeMismatch,
  BadDims,
  BadMagic,
  TruncatedFile,
  BadMaxval,
  Io,
  EmptyPatch,
  BadPatchSize,
  UninitializedGradient,
  DegenerateClass,
  EmptyRegionSet,
  EmptySplit,
  BadConfig,
};

const char *to_string(Errc code) noexcept;

/// Every failure in the library surfaces as this exception. The code is the
/// machine-readable part; the message carries context for humans.
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string &what);

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

} // namespace dale
