#include "polynext/rng.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace polynext {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed) {
  uint64_t s = seed;
  for (auto& w : state_) w = splitmix64(s);
}

uint64_t Rng::next_u64() {
  uint64_t result = rotl(state_[1] * 5, 7) * 9;
  uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

int64_t Rng::below(int64_t n) {
  check(n > 0, "rng: below() requires n > 0");
  // Rejection sampling to stay unbiased.
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t v = 0;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<int64_t>(v % un);
}

Rng Rng::fork(uint64_t stream) const {
  uint64_t mix = seed_ ^ (0xA0761D6478BD642FULL * (stream + 1));
  return Rng(mix);
}

Tensor Rng::normal_tensor(Shape shape, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
  return t;
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
  return t;
}

std::string Rng::serialize_state() const {
  std::ostringstream os;
  os << seed_ << " " << state_[0] << " " << state_[1] << " " << state_[2] << " " << state_[3] << " "
     << (have_spare_ ? 1 : 0);
  if (have_spare_) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), " %.17g", spare_);
    os << buf;
  }
  return os.str();
}

Rng Rng::deserialize_state(const std::string& blob) {
  std::istringstream is(blob);
  Rng r(0);
  int spare_flag = 0;
  is >> r.seed_ >> r.state_[0] >> r.state_[1] >> r.state_[2] >> r.state_[3] >> spare_flag;
  check(!is.fail(), "rng: malformed serialized state");
  r.have_spare_ = spare_flag != 0;
  if (r.have_spare_) {
    is >> r.spare_;
    check(!is.fail(), "rng: malformed serialized state (spare)");
  }
  return r;
}

}  // namespace polynext
