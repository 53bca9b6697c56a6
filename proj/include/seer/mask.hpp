#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

namespace seer {

/// Boolean attention mask over (query, key) pairs; true means "forbidden".
/// Copies are cheap (shared payload), so autograd closures can own one.
class Mask {
 public:
  Mask() = default;

  Mask(int rows, int cols, bool forbidden_everywhere = false)
      : rows_(rows), cols_(cols),
        bits_(std::make_shared<std::vector<std::uint8_t>>(
            static_cast<std::size_t>(rows) * cols,
            forbidden_everywhere ? 1 : 0)) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool empty() const { return !bits_; }

  bool forbidden(int r, int c) const {
    return (*bits_)[static_cast<std::size_t>(r) * cols_ + c] != 0;
  }

  void set_forbidden(int r, int c, bool v) {
    detach_payload();
    (*bits_)[static_cast<std::size_t>(r) * cols_ + c] = v ? 1 : 0;
  }

  /// Causal mask: row i may attend to columns <= i.
  static Mask causal(int n) {
    Mask m(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) m.set_forbidden(i, j, true);
    return m;
  }

 private:
  void detach_payload() {
    if (!bits_) throw std::logic_error("Mask: empty");
    if (bits_.use_count() > 1)
      bits_ = std::make_shared<std::vector<std::uint8_t>>(*bits_);
  }

  int rows_ = 0, cols_ = 0;
  std::shared_ptr<std::vector<std::uint8_t>> bits_;
};

}  // namespace seer
