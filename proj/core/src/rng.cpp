#include "metalm/rng.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "metalm/errors.hpp"

namespace metalm {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t seed, uint64_t purpose, uint64_t a, uint64_t b) {
  uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ULL);
  h = splitmix64(h ^ purpose * 0xff51afd7ed558ccdULL);
  h = splitmix64(h ^ a * 0xc4ceb9fe1a85ec53ULL);
  h = splitmix64(h ^ b * 0x2545f4914f6cdd1dULL);
  return h;
}

int64_t Rng::uniform_int(int64_t n) {
  require(n > 0, ErrorKind::numeric, "uniform_int: n must be positive");
  auto v = static_cast<int64_t>(uniform() * static_cast<double>(n));
  return v < n ? v : n - 1;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] avoids log(0).
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::string Rng::state_hex() const {
  // Engine state in its textual form, plus the Box-Muller spare as raw bits.
  std::ostringstream os;
  os << gen_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  uint64_t bits = 0;
  std::memcpy(&bits, &spare_, sizeof(bits));
  os << bits;
  std::string text = os.str();
  static const char* digits = "0123456789abcdef";
  std::string hex;
  hex.reserve(text.size() * 2);
  for (unsigned char c : text) {
    hex.push_back(digits[c >> 4]);
    hex.push_back(digits[c & 0xf]);
  }
  return hex;
}

void Rng::set_state_hex(const std::string& hex) {
  require(hex.size() % 2 == 0, ErrorKind::data, "generator state hex has odd length");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  std::string text;
  text.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2) {
    int hi = nibble(hex[i]), lo = nibble(hex[i + 1]);
    require(hi >= 0 && lo >= 0, ErrorKind::data, "generator state is not valid hex");
    text.push_back(static_cast<char>((hi << 4) | lo));
  }
  std::istringstream is(text);
  std::mt19937_64 gen;
  int spare_flag = 0;
  uint64_t bits = 0;
  is >> gen >> spare_flag >> bits;
  require(!is.fail(), ErrorKind::data, "generator state failed to parse");
  gen_ = gen;
  has_spare_ = spare_flag != 0;
  std::memcpy(&spare_, &bits, sizeof(spare_));
}

}  // namespace metalm
