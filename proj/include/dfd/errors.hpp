#pragma once

#include <stdexcept>
#include <string>

namespace dfd {

/// Base class for all library errors.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid argument value (bad sigma, K out of range, ...).
struct parameter_error : error {
    using error::error;
};

/// Tensor/image dimensions do not match the operation's contract.
struct shape_error : error {
    using error::error;
};

/// Input data is unusable (non-finite samples, empty dataset, ...).
struct data_error : error {
    using error::error;
};

/// A file on disk is truncated, has a bad magic, or disagrees with its manifest.
struct corruption_error : error {
    using error::error;
};

/// Inconsistent configuration (encoder hash mismatch, unsupported resolution, ...).
struct config_error : error {
    using error::error;
};

/// A component ROI collapsed to zero area after clamping.
struct degenerate_roi_error : error {
    using error::error;
};

} // namespace dfd
