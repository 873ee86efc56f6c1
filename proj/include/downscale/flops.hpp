#pragma once

#include <cstdint>
#include <type_traits>
#include <utility>

namespace downscale {

enum class FlopCategory { attention, matmul, conv, other };

// Analytic multiply-add counts per op category. Forward passes only; the
// backward pass is not charged.
struct FlopLedger {
  std::uint64_t attention = 0;
  std::uint64_t matmul = 0;
  std::uint64_t conv = 0;
  std::uint64_t other = 0;

  std::uint64_t total() const { return attention + matmul + conv + other; }
  void credit(FlopCategory category, std::uint64_t madds);
  FlopLedger& operator+=(const FlopLedger& rhs);
  friend bool operator==(const FlopLedger&, const FlopLedger&) = default;
};

// Charges the innermost open scope on this thread; no-op without a scope.
void credit_flops(FlopCategory category, std::uint64_t madds);
void credit_flops(const FlopLedger& ledger);

// RAII recording scope. Ops executed while the scope is innermost are
// charged to it; on close its totals are folded into the enclosing scope.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

  const FlopLedger& ledger() const { return ledger_; }
  void charge(FlopCategory category, std::uint64_t madds) {
    ledger_.credit(category, madds);
  }
  void charge(const FlopLedger& ledger) { ledger_ += ledger; }

 private:
  FlopLedger ledger_;
  FlopScope* parent_;
};

template <typename F>
auto with_flop_ledger(F&& f) {
  using R = std::invoke_result_t<F&>;
  FlopScope scope;
  if constexpr (std::is_void_v<R>) {
    f();
    return scope.ledger();
  } else {
    R result = f();
    return std::pair<R, FlopLedger>(std::move(result), scope.ledger());
  }
}

}  // namespace downscale
