#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spx {

// Configuration problems (bad key, bad dimension) get their own type so the
// CLI can map them to exit code 2 with the offending key in the message.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense pixel -> id assignment (superpixel ids or class ids too wide for a
// byte image).
struct IdMap {
  int h = 0;
  int w = 0;
  std::vector<int> ids;

  int at(int y, int x) const { return ids[static_cast<std::size_t>(y) * w + x]; }
  int& at(int y, int x) { return ids[static_cast<std::size_t>(y) * w + x]; }
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

inline void check_cfg(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace spx
