#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace bandvq::fft {

namespace detail {

// kissfft caches twiddles per size inside the Eigen::FFT object.
template <class T>
Eigen::FFT<T>& half_spectrum_engine() {
  thread_local Eigen::FFT<T> f = [] {
    Eigen::FFT<T> e;
    e.SetFlag(Eigen::FFT<T>::HalfSpectrum);
    return e;
  }();
  return f;
}

template <class T>
Eigen::FFT<T>& complex_engine() {
  thread_local Eigen::FFT<T> f;
  return f;
}

}  // namespace detail

/// Real FFT: n real samples -> n/2 + 1 complex bins.
template <class T>
std::vector<std::complex<T>> rfft(std::span<const T> x) {
  std::vector<T> in(x.begin(), x.end());
  std::vector<std::complex<T>> out;
  detail::half_spectrum_engine<T>().fwd(out, in);
  out.resize(x.size() / 2 + 1);
  return out;
}

/// Inverse of rfft for a length-n signal (scaled by 1/n).
template <class T>
std::vector<T> irfft(const std::vector<std::complex<T>>& bins, std::size_t n) {
  std::vector<std::complex<T>> in(bins);
  std::vector<T> out;
  detail::half_spectrum_engine<T>().inv(out, in, static_cast<int>(n));
  out.resize(n);
  return out;
}

/// Unscaled forward complex DFT.
template <class T>
std::vector<std::complex<T>> fft(const std::vector<std::complex<T>>& x) {
  std::vector<std::complex<T>> out;
  detail::complex_engine<T>().fwd(out, x);
  return out;
}

/// Periodic Hann window of length n.
template <class T>
std::vector<T> hann_periodic(std::size_t n) {
  std::vector<T> w(n);
  constexpr double two_pi = 6.283185307179586476925286766559;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<T>(0.5 - 0.5 * std::cos(two_pi * static_cast<double>(i) /
                                               static_cast<double>(n)));
  return w;
}

}  // namespace bandvq::fft
