#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <vector>

#include "qrstore/core.hpp"
#include "qrstore/executor.hpp"
#include "qrstore/serialization.hpp"
#include "qrstore/store.hpp"

namespace qrstore {

class RecoveryError : public Error {
 public:
  using Error::Error;
};

struct WriteOnlyEntry {
  Key key;
  Bytes value;

  friend bool operator==(const WriteOnlyEntry&, const WriteOnlyEntry&) = default;
};

/// Final committed value of every key some committed transaction wrote in
/// one (batch, partition, sub-range). Entries sorted by key.
struct WriteOnlyEQ {
  std::uint64_t batch_id = 0;
  std::uint32_t partition = 0;
  std::uint32_t subrange = 0;
  std::vector<WriteOnlyEntry> entries;

  friend bool operator==(const WriteOnlyEQ&, const WriteOnlyEQ&) = default;
};

/// Call after rollback: the store then holds the last committed value of
/// every key.
WriteOnlyEQ build_write_only_eq(std::uint64_t batch_id, std::uint32_t partition, std::uint32_t subrange,
                                const SlotState& state, const PartitionStore& store,
                                const std::function<bool(const TxnId&)>& committed);

/// Pure overwrites, so applying twice is harmless.
void apply(const WriteOnlyEQ& eq, PartitionStore& store);

void encode(ByteWriter& w, const WriteOnlyEQ& eq);
WriteOnlyEQ decode_write_only_eq(ByteReader& r);

/// One node's log entry for one batch: its write-only EQs by sub-range.
struct LogRecord {
  std::uint64_t batch_id = 0;
  std::uint32_t partition = 0;
  std::vector<WriteOnlyEQ> eqs;

  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

Bytes encode_log_record(const LogRecord& rec);
LogRecord decode_log_record(std::span<const std::uint8_t> bytes);

/// Append-only per-node log. In memory, optionally mirrored to a file of
/// 4-byte-length-prefixed records.
class Log {
 public:
  Log() = default;
  explicit Log(std::filesystem::path file, bool fsync = false);

  /// Records must arrive in consecutive batch order. Throws Error otherwise.
  void append(LogRecord rec);
  std::vector<LogRecord> records_after(std::optional<std::uint64_t> watermark) const;
  std::optional<std::uint64_t> last_batch() const;
  std::size_t size() const;
  void clear();
  /// Drops the records of a batch and everything after it.
  void truncate_from(std::uint64_t batch_id);

  /// Reads a log file written by a file-backed Log. Throws DecodeError on a
  /// torn or corrupt file.
  static std::vector<LogRecord> read_file(const std::filesystem::path& file);

 private:
  mutable std::mutex mu_;
  std::vector<LogRecord> records_;
  std::optional<std::filesystem::path> file_;
  bool fsync_ = false;
};

struct Checkpoint {
  std::optional<std::uint64_t> watermark;  // last batch reflected; none = initial load
  std::uint32_t partitions = 1;
  std::uint32_t subranges = 1;
  std::uint32_t record_size = 0;
  std::uint32_t partition = 0;
  Bytes data;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

Checkpoint take_checkpoint(const PartitionStore& store, std::optional<std::uint64_t> watermark,
                           std::uint32_t subranges);
Bytes encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

struct Recovered {
  std::optional<std::uint64_t> last_batch;
  std::size_t replayed = 0;
};

/// Restores `store` from the snapshot and replays every log record after its
/// watermark in batch order. Throws RecoveryError naming the first missing
/// epoch.
Recovered recover_node(PartitionStore& store, const Checkpoint& checkpoint, const std::vector<LogRecord>& log);

struct ElectionCandidate {
  std::uint32_t rank = 0;
  std::optional<std::uint64_t> committed_batch;
  bool alive = true;
};

/// Highest committed batch wins, lowest rank breaks ties. Throws
/// RecoveryError if no candidate is alive.
std::uint32_t elect_leader(const std::vector<ElectionCandidate>& group);

/// Appends whatever `source` has beyond `target`'s last batch. Returns the
/// number of records copied.
std::size_t catch_up(Log& target, const Log& source);

/// Heartbeat bookkeeping: a peer is suspected once `missed` periods pass
/// without a beat.
class FailureDetector {
 public:
  using Clock = std::chrono::steady_clock;

  explicit FailureDetector(std::chrono::milliseconds period = std::chrono::milliseconds{100}, std::uint32_t missed = 5)
      : period_(period), missed_(missed) {}

  void watch(std::uint32_t peer, Clock::time_point now);
  void beat(std::uint32_t peer, Clock::time_point now);
  std::vector<std::uint32_t> suspects(Clock::time_point now) const;
  std::chrono::milliseconds period() const noexcept { return period_; }

 private:
  std::chrono::milliseconds period_;
  std::uint32_t missed_;
  mutable std::mutex mu_;
  std::map<std::uint32_t, Clock::time_point> last_;
};

}  // namespace qrstore
