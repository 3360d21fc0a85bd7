#pragma once

#include <any>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <typeinfo>
#include <vector>

#include "metalm/errors.hpp"

namespace metalm {

// Rendezvous point for a fixed set of worker threads ("ranks") that exchange
// values without any external transport. Every rank must call every
// collective in the same order with a matching signature; mismatches, early
// exits, and timeouts poison the group so the remaining ranks fail with a
// protocol error instead of deadlocking. Results are computed identically on
// every rank (reductions sum in rank order at double precision), so a
// world-of-N run is bitwise reproducible.
class RankGroup {
 public:
  explicit RankGroup(int64_t world_size,
                     std::chrono::milliseconds timeout = std::chrono::minutes(2));

  int64_t world_size() const { return world_; }
  uint64_t completed_rounds() const;

  template <typename T>
  T broadcast(int64_t rank, T value, int64_t root) {
    precheck(rank);
    check_root(root);
    if (world_ == 1) return value;
    auto snap = exchange(rank, tagged<T>("broadcast"), root,
                         rank == root ? std::any(std::move(value)) : std::any());
    return cast_slot<T>(snap[static_cast<size_t>(root)]);
  }

  template <typename T>
  std::vector<T> all_gather(int64_t rank, T value) {
    precheck(rank);
    if (world_ == 1) return {std::move(value)};
    auto snap = exchange(rank, tagged<T>("all_gather"), 0, std::any(std::move(value)));
    std::vector<T> out;
    out.reserve(snap.size());
    for (auto& slot : snap) out.push_back(cast_slot<T>(slot));
    return out;
  }

  // Root's parts[i] is delivered to rank i.
  template <typename T>
  T scatter(int64_t rank, std::vector<T> parts, int64_t root) {
    precheck(rank);
    check_root(root);
    if (rank == root)
      require(static_cast<int64_t>(parts.size()) == world_, ErrorKind::protocol,
              "scatter expects one part per rank");
    if (world_ == 1) return std::move(parts[0]);
    auto snap = exchange(rank, tagged<T>("scatter"), root,
                         rank == root ? std::any(std::move(parts)) : std::any());
    auto all = cast_slot<std::vector<T>>(snap[static_cast<size_t>(root)]);
    return std::move(all[static_cast<size_t>(rank)]);
  }

  // Element-wise mean across ranks, written back in place. Summation runs in
  // rank order at double precision on every rank, so all ranks see identical
  // bits.
  template <typename T>
  void all_reduce_mean(int64_t rank, std::span<T> data) {
    static_assert(std::is_floating_point_v<T>);
    precheck(rank);
    if (world_ == 1) return;
    std::vector<T> copy(data.begin(), data.end());
    auto snap = exchange(rank, tagged<T>("all_reduce_mean"),
                         static_cast<int64_t>(data.size()), std::any(std::move(copy)));
    std::vector<const std::vector<T>*> parts;
    parts.reserve(snap.size());
    for (auto& slot : snap) parts.push_back(&cast_slot_ref<std::vector<T>>(slot));
    double inv = 1.0 / static_cast<double>(world_);
    for (size_t i = 0; i < data.size(); ++i) {
      double acc = 0.0;
      for (const auto* p : parts) acc += static_cast<double>((*p)[i]);
      data[i] = static_cast<T>(acc * inv);
    }
  }

  void barrier(int64_t rank);

  // Marks this rank as done. A leave during an open round, or any collective
  // entered after a rank has left, fails the group.
  void leave(int64_t rank);

  // Poisons the group: every blocked or future call raises a protocol error
  // carrying `reason`.
  void abort(int64_t rank, const std::string& reason);

 private:
  enum class Phase { open, draining };

  template <typename T>
  static std::string tagged(const char* op) {
    return std::string(op) + ":" + typeid(T).name();
  }
  template <typename T>
  static T cast_slot(std::any& slot) {
    T* p = std::any_cast<T>(&slot);
    require(p != nullptr, ErrorKind::protocol, "collective payload type mismatch");
    return std::move(*p);
  }
  template <typename T>
  static const T& cast_slot_ref(std::any& slot) {
    T* p = std::any_cast<T>(&slot);
    require(p != nullptr, ErrorKind::protocol, "collective payload type mismatch");
    return *p;
  }

  void check_root(int64_t root) const;
  void check_rank(int64_t rank) const;
  void precheck(int64_t rank) const;  // rank bounds + poison state

  // Blocks until all ranks contribute, then returns a snapshot of every
  // rank's payload. Serialises rounds: a rank cannot enter round k+1 until
  // every rank has taken its snapshot of round k.
  std::vector<std::any> exchange(int64_t rank, const std::string& op, int64_t detail,
                                 std::any payload);

  template <typename Pred>
  void wait_or_poison(std::unique_lock<std::mutex>& lock, Pred pred, const char* stage);
  [[noreturn]] void poison_locked(const std::string& reason);
  void throw_if_poisoned() const;

  int64_t world_;
  std::chrono::milliseconds timeout_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  Phase phase_ = Phase::open;
  int64_t arrived_ = 0;
  int64_t departed_ = 0;
  uint64_t rounds_ = 0;
  std::string op_name_;
  int64_t op_detail_ = 0;
  std::vector<std::optional<std::any>> slots_;
  std::vector<bool> left_;
  int64_t left_count_ = 0;
  bool poisoned_ = false;
  std::string poison_reason_;
};

}  // namespace metalm
