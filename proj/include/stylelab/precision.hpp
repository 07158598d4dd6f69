#pragma once

// Every library symbol lives in an inline namespace named after the scalar
// type, so 32-bit and 64-bit builds of the library can share one binary.
#ifdef STYLELAB_DOUBLE
#define STYLELAB_BEGIN_PRECISION inline namespace f64 {
#else
#define STYLELAB_BEGIN_PRECISION inline namespace f32 {
#endif
#define STYLELAB_END_PRECISION }

namespace stylelab {
STYLELAB_BEGIN_PRECISION

#ifdef STYLELAB_DOUBLE
using real = double;
inline constexpr const char* kPrecisionName = "f64";
#else
using real = float;
inline constexpr const char* kPrecisionName = "f32";
#endif

STYLELAB_END_PRECISION
}  // namespace stylelab
