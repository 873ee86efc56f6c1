#include "downscale/flops.hpp"

namespace downscale {

namespace {
thread_local FlopScope* t_innermost = nullptr;
}

void FlopLedger::credit(FlopCategory category, std::uint64_t madds) {
  switch (category) {
    case FlopCategory::attention: attention += madds; break;
    case FlopCategory::matmul: matmul += madds; break;
    case FlopCategory::conv: conv += madds; break;
    case FlopCategory::other: other += madds; break;
  }
}

FlopLedger& FlopLedger::operator+=(const FlopLedger& rhs) {
  attention += rhs.attention;
  matmul += rhs.matmul;
  conv += rhs.conv;
  other += rhs.other;
  return *this;
}

FlopScope::FlopScope() : parent_(t_innermost) { t_innermost = this; }

FlopScope::~FlopScope() {
  t_innermost = parent_;
  if (parent_) parent_->charge(ledger_);
}

void credit_flops(FlopCategory category, std::uint64_t madds) {
  if (t_innermost) t_innermost->charge(category, madds);
}

void credit_flops(const FlopLedger& ledger) {
  if (t_innermost) t_innermost->charge(ledger);
}

}  // namespace downscale
