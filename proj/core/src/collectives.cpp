#include "metalm/collectives.hpp"

namespace metalm {

RankGroup::RankGroup(int64_t world_size, std::chrono::milliseconds timeout)
    : world_(world_size), timeout_(timeout) {
  require(world_ >= 1, ErrorKind::config, "world size must be at least 1");
  slots_.resize(static_cast<size_t>(world_));
  left_.resize(static_cast<size_t>(world_), false);
}

uint64_t RankGroup::completed_rounds() const {
  std::lock_guard<std::mutex> lock(mu_);
  return rounds_;
}

void RankGroup::check_root(int64_t root) const {
  require(root >= 0 && root < world_, ErrorKind::config,
          "root " + std::to_string(root) + " outside world of " + std::to_string(world_));
}

void RankGroup::check_rank(int64_t rank) const {
  require(rank >= 0 && rank < world_, ErrorKind::config,
          "rank " + std::to_string(rank) + " outside world of " + std::to_string(world_));
}

void RankGroup::precheck(int64_t rank) const {
  check_rank(rank);
  std::lock_guard<std::mutex> lock(mu_);
  throw_if_poisoned();
}

void RankGroup::throw_if_poisoned() const {
  if (poisoned_) fail(ErrorKind::protocol, poison_reason_);
}

void RankGroup::poison_locked(const std::string& reason) {
  if (!poisoned_) {
    poisoned_ = true;
    poison_reason_ = reason;
  }
  cv_.notify_all();
  fail(ErrorKind::protocol, poison_reason_);
}

template <typename Pred>
void RankGroup::wait_or_poison(std::unique_lock<std::mutex>& lock, Pred pred, const char* stage) {
  bool ok = cv_.wait_for(lock, timeout_, [&] { return poisoned_ || pred(); });
  if (poisoned_) fail(ErrorKind::protocol, poison_reason_);
  if (!ok)
    poison_locked("collective '" + op_name_ + "' timed out while " + stage + " after " +
                  std::to_string(timeout_.count()) + "ms");
}

void RankGroup::barrier(int64_t rank) {
  check_rank(rank);
  if (world_ == 1) {
    std::lock_guard<std::mutex> lock(mu_);
    throw_if_poisoned();
    return;
  }
  exchange(rank, "barrier", 0, std::any(int64_t{0}));
}

void RankGroup::leave(int64_t rank) {
  check_rank(rank);
  std::lock_guard<std::mutex> lock(mu_);
  if (left_[static_cast<size_t>(rank)]) return;
  left_[static_cast<size_t>(rank)] = true;
  ++left_count_;
  if (!poisoned_ && phase_ == Phase::open && arrived_ > 0 &&
      !slots_[static_cast<size_t>(rank)].has_value()) {
    poisoned_ = true;
    poison_reason_ =
        "rank " + std::to_string(rank) + " left during collective '" + op_name_ + "'";
  }
  cv_.notify_all();
}

void RankGroup::abort(int64_t rank, const std::string& reason) {
  check_rank(rank);
  std::lock_guard<std::mutex> lock(mu_);
  if (!poisoned_) {
    poisoned_ = true;
    poison_reason_ = "rank " + std::to_string(rank) + " aborted: " + reason;
  }
  cv_.notify_all();
}

std::vector<std::any> RankGroup::exchange(int64_t rank, const std::string& op, int64_t detail,
                                          std::any payload) {
  check_rank(rank);
  std::unique_lock<std::mutex> lock(mu_);
  throw_if_poisoned();
  if (left_[static_cast<size_t>(rank)])
    poison_locked("rank " + std::to_string(rank) + " called '" + op + "' after leaving");
  if (left_count_ > 0)
    poison_locked("collective '" + op + "' entered after a rank left the group");

  // Wait for the previous round to fully drain before joining a new one.
  wait_or_poison(lock, [&] { return phase_ == Phase::open; }, "waiting for the previous round");

  if (arrived_ == 0) {
    op_name_ = op;
    op_detail_ = detail;
  } else if (op_name_ != op || op_detail_ != detail) {
    poison_locked("collective mismatch: rank " + std::to_string(rank) + " called '" + op + "' (" +
                  std::to_string(detail) + ") while the round runs '" + op_name_ + "' (" +
                  std::to_string(op_detail_) + ")");
  }
  if (slots_[static_cast<size_t>(rank)].has_value())
    poison_locked("rank " + std::to_string(rank) + " re-entered collective '" + op + "'");
  slots_[static_cast<size_t>(rank)] = std::move(payload);
  ++arrived_;

  if (arrived_ == world_) {
    phase_ = Phase::draining;
    cv_.notify_all();
  } else {
    wait_or_poison(lock, [&] { return phase_ == Phase::draining; }, "waiting for all ranks");
  }

  std::vector<std::any> snapshot;
  snapshot.reserve(static_cast<size_t>(world_));
  for (auto& slot : slots_) snapshot.push_back(*slot);

  ++departed_;
  if (departed_ == world_) {
    for (auto& slot : slots_) slot.reset();
    arrived_ = 0;
    departed_ = 0;
    phase_ = Phase::open;
    ++rounds_;
    cv_.notify_all();
  }
  return snapshot;
}

}  // namespace metalm
