#pragma once

// Embedded map-shuffle-reduce executor. Mappers run over fixed input splits,
// their emissions are routed to partitions, sorted (spilling to disk past a
// memory budget), and each partition is reduced once. Output bytes depend
// only on the splits and the job functions, never on the worker count.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace flowcube::mr {

struct InputSplit {
  std::filesystem::path file;
  uint64_t offset = 0;
  uint64_t length = 0;
};

// Cuts files into byte ranges of at most `split_bytes`. A split owns every
// line that starts inside its range.
std::vector<InputSplit> MakeSplits(std::span<const std::filesystem::path> files,
                                   uint64_t split_bytes);

class JobRunner;
struct MapperState;

class MapContext {
 public:
  // Routes through JobSpec::partitioner.
  void Emit(std::string key, std::string value);
  void EmitTo(uint32_t partition, std::string key, std::string value);
  // Output line for map-only jobs.
  void Write(std::string_view line);
  void Count(const std::string& counter, int64_t delta = 1);
  std::string_view broadcast() const;
  size_t split_index() const;
  uint32_t partitions() const;

 private:
  friend class JobRunner;
  MapContext(JobRunner* runner, MapperState* state) : runner_(runner), state_(state) {}
  JobRunner* runner_;
  MapperState* state_;
};

class Mapper {
 public:
  virtual ~Mapper() = default;
  virtual void Map(std::string_view line, MapContext& ctx) = 0;
  // Runs exactly once, after the mapper's last record.
  virtual void Cleanup(MapContext&) {}
};

struct ReducerState;

class ReduceContext {
 public:
  void Write(std::string_view line);
  void Count(const std::string& counter, int64_t delta = 1);
  std::string_view broadcast() const;
  uint32_t partition() const;

 private:
  friend class JobRunner;
  ReduceContext(JobRunner* runner, ReducerState* state) : runner_(runner), state_(state) {}
  JobRunner* runner_;
  ReducerState* state_;
};

class Reducer {
 public:
  virtual ~Reducer() = default;
  // Keys arrive in byte order; values within a key are sorted by bytes.
  virtual void Reduce(std::string_view key, std::span<const std::string> values,
                      ReduceContext& ctx) = 0;
  virtual void Finish(ReduceContext&) {}
};

struct JobSpec {
  std::vector<InputSplit> splits;
  // One mapper per split. Receives the broadcast payload.
  std::function<std::unique_ptr<Mapper>(std::string_view broadcast)> make_mapper;
  // Required when mappers call Emit().
  std::function<uint32_t(std::string_view key)> partitioner;
  // Null makes the job map-only: each split writes its own output file.
  std::function<std::unique_ptr<Reducer>(uint32_t partition, std::string_view broadcast)>
      make_reducer;
  uint32_t workers = 1;
  uint32_t partitions = 1;
  std::string broadcast;
  std::filesystem::path output_dir;
  uint64_t shuffle_memory_bytes = uint64_t{256} << 20;
};

struct JobResult {
  // part-NNNNN per partition, or part-m-NNNNN per split for map-only jobs.
  std::vector<std::filesystem::path> outputs;
  // Mapper emissions routed to each partition.
  std::vector<uint64_t> partition_loads;
  uint64_t map_input_records = 0;
  uint64_t map_emissions = 0;
  uint64_t reduce_groups = 0;
  uint64_t spilled_runs = 0;
  std::map<std::string, int64_t> counters;
};

class JobError : public std::runtime_error {
 public:
  explicit JobError(const std::string& what, bool caused_by_data = false)
      : std::runtime_error(what), caused_by_data_(caused_by_data) {}
  // True when a map or reduce function rejected its input (DataError).
  bool caused_by_data() const { return caused_by_data_; }

 private:
  bool caused_by_data_;
};

// Throws JobError (after removing partial outputs) when any map or reduce
// function throws.
JobResult RunJob(const JobSpec& spec);

struct LoadStats {
  double avg = 0;
  double stddev = 0;
  uint64_t min = 0;
  uint64_t max = 0;
};
LoadStats ComputeLoadStats(std::span<const uint64_t> loads);

}  // namespace flowcube::mr
