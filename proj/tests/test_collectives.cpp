#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstring>
#include <functional>
#include <thread>
#include <vector>

#include "metalm/collectives.hpp"
#include "metalm/errors.hpp"

using metalm::ErrorKind;
using metalm::RankGroup;

namespace {

struct RankOutcome {
  bool threw = false;
  ErrorKind kind = ErrorKind::protocol;
  std::string message;
};

// Runs fn(rank) on world_size threads; exceptions are captured per rank.
std::vector<RankOutcome> run_ranks(RankGroup& group, int64_t world_size,
                                   const std::function<void(int64_t)>& fn) {
  std::vector<RankOutcome> outcomes(static_cast<size_t>(world_size));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(world_size));
  for (int64_t r = 0; r < world_size; ++r)
    threads.emplace_back([&, r] {
      try {
        fn(r);
      } catch (const metalm::Error& e) {
        outcomes[static_cast<size_t>(r)] = {true, e.kind(), e.what()};
        group.leave(r);
      }
    });
  for (auto& t : threads) t.join();
  return outcomes;
}

}  // namespace

TEST_CASE("world of one short-circuits every collective") {
  RankGroup group(1);
  CHECK(group.broadcast(0, 42, 0) == 42);
  CHECK(group.all_gather(0, std::string("x")) == std::vector<std::string>{"x"});
  CHECK(group.scatter(0, std::vector<int>{7}, 0) == 7);
  std::vector<float> data{1.0f, 2.0f};
  group.all_reduce_mean(0, std::span<float>(data));
  CHECK(data == std::vector<float>{1.0f, 2.0f});
  group.barrier(0);
  CHECK_THROWS_AS(group.broadcast(0, 1, 3), metalm::Error);
}

TEST_CASE("broadcast, gather, and scatter move values between ranks") {
  constexpr int64_t kWorld = 4;
  RankGroup group(kWorld);
  std::vector<std::vector<int64_t>> gathered(kWorld);
  std::vector<int64_t> bcast(kWorld), scattered(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    bcast[static_cast<size_t>(rank)] = group.broadcast<int64_t>(rank, rank == 2 ? 99 : -1, 2);
    gathered[static_cast<size_t>(rank)] = group.all_gather<int64_t>(rank, rank * 10);
    std::vector<int64_t> parts;
    if (rank == 0) parts = {100, 101, 102, 103};
    scattered[static_cast<size_t>(rank)] = group.scatter<int64_t>(rank, parts, 0);
  });
  for (const auto& o : outcomes) CHECK(!o.threw);
  for (int64_t r = 0; r < kWorld; ++r) {
    CHECK(bcast[static_cast<size_t>(r)] == 99);
    CHECK(gathered[static_cast<size_t>(r)] == std::vector<int64_t>{0, 10, 20, 30});
    CHECK(scattered[static_cast<size_t>(r)] == 100 + r);
  }
  CHECK(group.completed_rounds() == 3);
}

TEST_CASE("reductions are rank-order deterministic and identical everywhere") {
  constexpr int64_t kWorld = 4;
  RankGroup group(kWorld);
  std::vector<std::vector<double>> results(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    // Magnitudes chosen so summation order changes the answer.
    std::vector<double> contrib{0.0};
    contrib[0] = (rank == 0) ? 1e20 : (rank == 1) ? 1.0 : (rank == 2) ? -1e20 : 1.0;
    group.all_reduce_mean(rank, std::span<double>(contrib));
    results[static_cast<size_t>(rank)] = contrib;
  });
  for (const auto& o : outcomes) CHECK(!o.threw);
  // ((1e20 + 1) + -1e20 + 1) / 4 in rank order: 1e20 + 1 rounds to 1e20.
  for (int64_t r = 0; r < kWorld; ++r) CHECK(results[static_cast<size_t>(r)][0] == 0.25);

  std::vector<std::vector<float>> fresults(kWorld);
  auto out2 = run_ranks(group, kWorld, [&](int64_t rank) {
    std::vector<float> contrib{static_cast<float>(rank + 1), 8.0f};
    group.all_reduce_mean(rank, std::span<float>(contrib));
    fresults[static_cast<size_t>(rank)] = contrib;
  });
  for (const auto& o : out2) CHECK(!o.threw);
  for (int64_t r = 0; r < kWorld; ++r) {
    CHECK(fresults[static_cast<size_t>(r)][0] == 2.5f);
    CHECK(fresults[static_cast<size_t>(r)][1] == 8.0f);
    CHECK(std::memcmp(fresults[static_cast<size_t>(r)].data(), fresults[0].data(),
                      2 * sizeof(float)) == 0);
  }
}

TEST_CASE("many interleaved rounds stay consistent under scheduling noise") {
  constexpr int64_t kWorld = 4;
  RankGroup group(kWorld);
  std::vector<int64_t> sums(kWorld, 0);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    for (int step = 0; step < 200; ++step) {
      if (rank == step % kWorld)
        std::this_thread::sleep_for(std::chrono::microseconds(50));
      auto all = group.all_gather<int64_t>(rank, step * 100 + rank);
      for (int64_t v : all) sums[static_cast<size_t>(rank)] += v;
      group.barrier(rank);
    }
  });
  for (const auto& o : outcomes) CHECK(!o.threw);
  for (int64_t r = 1; r < kWorld; ++r) CHECK(sums[static_cast<size_t>(r)] == sums[0]);
  CHECK(group.completed_rounds() == 400);
}

TEST_CASE("mismatched collectives poison the whole group") {
  constexpr int64_t kWorld = 2;
  RankGroup group(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    if (rank == 0)
      group.broadcast<int64_t>(rank, 5, 0);
    else
      group.barrier(rank);
  });
  for (const auto& o : outcomes) {
    CHECK(o.threw);
    CHECK(o.kind == ErrorKind::protocol);
    CHECK(o.message.find("mismatch") != std::string::npos);
  }
  CHECK_THROWS_AS(group.barrier(0), metalm::Error);
}

TEST_CASE("mismatched reduce lengths poison the group") {
  constexpr int64_t kWorld = 2;
  RankGroup group(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    std::vector<float> data(rank == 0 ? 3 : 4, 1.0f);
    group.all_reduce_mean(rank, std::span<float>(data));
  });
  for (const auto& o : outcomes) {
    CHECK(o.threw);
    CHECK(o.kind == ErrorKind::protocol);
  }
}

TEST_CASE("a failing rank aborts the group instead of deadlocking it") {
  constexpr int64_t kWorld = 3;
  RankGroup group(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    if (rank == 1) {
      group.abort(rank, "simulated failure");
      metalm::fail(ErrorKind::numeric, "simulated failure");
    }
    group.barrier(rank);
  });
  CHECK(outcomes[0].threw);
  CHECK(outcomes[0].kind == ErrorKind::protocol);
  CHECK(outcomes[0].message.find("simulated failure") != std::string::npos);
  CHECK(outcomes[1].kind == ErrorKind::numeric);
  CHECK(outcomes[2].threw);
}

TEST_CASE("a clean leave fails later collectives without hanging") {
  constexpr int64_t kWorld = 2;
  RankGroup group(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    group.barrier(rank);
    if (rank == 1) {
      group.leave(rank);
      return;
    }
    // Give rank 1 time to leave, then try another round.
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    group.barrier(rank);
  });
  CHECK(!outcomes[1].threw);
  CHECK(outcomes[0].threw);
  CHECK(outcomes[0].kind == ErrorKind::protocol);
}

TEST_CASE("a rank that leaves mid-round poisons the waiters") {
  constexpr int64_t kWorld = 2;
  RankGroup group(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    if (rank == 1) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      group.leave(rank);
      return;
    }
    group.barrier(rank);
  });
  CHECK(!outcomes[1].threw);
  CHECK(outcomes[0].threw);
  CHECK(outcomes[0].message.find("left") != std::string::npos);
}

TEST_CASE("stragglers trip the timeout instead of blocking forever") {
  constexpr int64_t kWorld = 2;
  RankGroup group(kWorld, std::chrono::milliseconds(100));
  auto start = std::chrono::steady_clock::now();
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    if (rank == 1) return;  // never shows up
    group.barrier(rank);
  });
  auto elapsed = std::chrono::steady_clock::now() - start;
  CHECK(outcomes[0].threw);
  CHECK(outcomes[0].kind == ErrorKind::protocol);
  CHECK(outcomes[0].message.find("timed out") != std::string::npos);
  CHECK(std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count() < 5000);
}

TEST_CASE("payload type mismatches surface as protocol errors") {
  constexpr int64_t kWorld = 2;
  RankGroup group(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    if (rank == 0)
      group.all_gather<int32_t>(rank, 1);
    else
      group.all_gather<int64_t>(rank, 1);
  });
  for (const auto& o : outcomes) {
    CHECK(o.threw);
    CHECK(o.kind == ErrorKind::protocol);
  }
}

TEST_CASE("structured payloads survive a broadcast round trip") {
  constexpr int64_t kWorld = 3;
  RankGroup group(kWorld);
  std::vector<std::vector<std::vector<int32_t>>> got(kWorld);
  auto outcomes = run_ranks(group, kWorld, [&](int64_t rank) {
    std::vector<std::vector<int32_t>> batch;
    if (rank == 0) batch = {{1, 2, 3}, {4, 5, 6}};
    got[static_cast<size_t>(rank)] = group.broadcast(rank, batch, 0);
  });
  for (const auto& o : outcomes) CHECK(!o.threw);
  for (int64_t r = 0; r < kWorld; ++r) {
    REQUIRE(got[static_cast<size_t>(r)].size() == 2);
    CHECK(got[static_cast<size_t>(r)][1] == std::vector<int32_t>{4, 5, 6});
  }
}
