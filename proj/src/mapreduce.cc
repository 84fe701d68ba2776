#include "flowcube/mapreduce.h"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <queue>
#include <variant>

#include <fmt/format.h>

#include "flowcube/errors.h"
#include "flowcube/io.h"
#include "flowcube/parallel.h"

namespace flowcube::mr {

namespace fs = std::filesystem;

namespace {

// Rough per-record bookkeeping cost on top of key/value bytes.
constexpr uint64_t kRecordOverhead = 64;

struct Record {
  std::string key;
  std::string value;
};

bool RecordLess(const Record& a, const Record& b) {
  if (a.key != b.key) return a.key < b.key;
  return a.value < b.value;
}

void PutU32(std::string& out, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 4);
}

bool ReadU32(std::istream& in, uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = uint32_t{b[0]} | uint32_t{b[1]} << 8 | uint32_t{b[2]} << 16 | uint32_t{b[3]} << 24;
  return true;
}

// A sorted run of records, held in memory or spilled to a file.
using MemoryRun = std::shared_ptr<std::vector<Record>>;
using SortedRun = std::variant<MemoryRun, fs::path>;

class RunReader {
 public:
  explicit RunReader(const SortedRun& run) {
    if (auto* mem = std::get_if<MemoryRun>(&run)) {
      mem_ = *mem;
    } else {
      file_ = std::make_unique<std::ifstream>(std::get<fs::path>(run), std::ios::binary);
      if (!*file_) {
        throw JobError(fmt::format("cannot open spill {}", std::get<fs::path>(run).string()));
      }
    }
  }

  bool Next(Record& rec) {
    if (mem_) {
      if (pos_ >= mem_->size()) return false;
      rec = (*mem_)[pos_++];
      return true;
    }
    uint32_t klen, vlen;
    if (!ReadU32(*file_, klen)) return false;
    rec.key.resize(klen);
    file_->read(rec.key.data(), klen);
    if (!ReadU32(*file_, vlen)) throw JobError("truncated spill file");
    rec.value.resize(vlen);
    file_->read(rec.value.data(), vlen);
    if (!*file_) throw JobError("truncated spill file");
    return true;
  }

 private:
  MemoryRun mem_;
  size_t pos_ = 0;
  std::unique_ptr<std::ifstream> file_;
};

}  // namespace

struct MapperState {
  size_t split = 0;
  std::vector<std::vector<Record>> buffers;
  uint64_t buffered_bytes = 0;
  int spill_seq = 0;
  std::vector<uint64_t> loads;
  uint64_t emissions = 0;
  uint64_t inputs = 0;
  std::map<std::string, int64_t> counters;
  std::string map_only_out;
};

struct ReducerState {
  uint32_t partition = 0;
  std::string out;
  std::ofstream file;
  std::map<std::string, int64_t> counters;
};

class JobRunner {
 public:
  explicit JobRunner(const JobSpec& spec) : spec_(spec) {}

  JobResult Run();

  void Emit(MapperState& st, uint32_t partition, std::string key, std::string value) {
    if (partition >= spec_.partitions) {
      throw JobError(fmt::format("partition {} out of range [0,{})", partition,
                                 spec_.partitions));
    }
    if (!spec_.make_reducer) throw JobError("Emit called in a map-only job");
    st.buffered_bytes += key.size() + value.size() + kRecordOverhead;
    st.buffers[partition].push_back({std::move(key), std::move(value)});
    ++st.loads[partition];
    ++st.emissions;
    if (st.buffered_bytes > mapper_budget_) Spill(st);
  }

  uint32_t Route(std::string_view key) const {
    if (!spec_.partitioner) throw JobError("Emit without a partitioner");
    return spec_.partitioner(key);
  }

  const JobSpec& spec() const { return spec_; }

  void WriteReduce(ReducerState& st, std::string_view line) {
    st.out.append(line);
    st.out.push_back('\n');
    if (st.out.size() > (1u << 20)) FlushReduce(st);
  }

 private:
  void RunMapper(size_t split_index);
  void RunReducer(uint32_t partition);
  void Spill(MapperState& st);
  void FlushReduce(ReducerState& st) {
    st.file.write(st.out.data(), static_cast<std::streamsize>(st.out.size()));
    if (!st.file) throw JobError("write failed");
    st.out.clear();
  }
  void MergeCounters(const std::map<std::string, int64_t>& c) {
    std::lock_guard lock(mu_);
    for (const auto& [k, v] : c) result_.counters[k] += v;
  }
  void Cleanup(bool remove_outputs);

  const JobSpec& spec_;
  fs::path tmp_dir_;
  uint64_t mapper_budget_ = 0;
  std::atomic<uint64_t> resident_bytes_{0};
  std::mutex mu_;
  std::vector<std::vector<SortedRun>> runs_;
  std::vector<fs::path> written_;
  JobResult result_;
};

void MapContext::Emit(std::string key, std::string value) {
  const uint32_t p = runner_->Route(key);
  runner_->Emit(*state_, p, std::move(key), std::move(value));
}

void MapContext::EmitTo(uint32_t partition, std::string key, std::string value) {
  runner_->Emit(*state_, partition, std::move(key), std::move(value));
}

void MapContext::Write(std::string_view line) {
  if (runner_->spec().make_reducer) throw JobError("Write is only valid in map-only jobs");
  state_->map_only_out.append(line);
  state_->map_only_out.push_back('\n');
}

void MapContext::Count(const std::string& counter, int64_t delta) {
  state_->counters[counter] += delta;
}

std::string_view MapContext::broadcast() const { return runner_->spec().broadcast; }
size_t MapContext::split_index() const { return state_->split; }
uint32_t MapContext::partitions() const { return runner_->spec().partitions; }

void ReduceContext::Write(std::string_view line) { runner_->WriteReduce(*state_, line); }
void ReduceContext::Count(const std::string& counter, int64_t delta) {
  state_->counters[counter] += delta;
}
std::string_view ReduceContext::broadcast() const { return runner_->spec().broadcast; }
uint32_t ReduceContext::partition() const { return state_->partition; }

std::vector<InputSplit> MakeSplits(std::span<const fs::path> files, uint64_t split_bytes) {
  if (split_bytes == 0) throw std::invalid_argument("split size must be positive");
  std::vector<InputSplit> splits;
  for (const auto& f : files) {
    const uint64_t size = fs::file_size(f);
    for (uint64_t off = 0; off < size; off += split_bytes) {
      splits.push_back({f, off, std::min(split_bytes, size - off)});
    }
  }
  return splits;
}

void JobRunner::Spill(MapperState& st) {
  for (uint32_t p = 0; p < st.buffers.size(); ++p) {
    auto& buf = st.buffers[p];
    if (buf.empty()) continue;
    std::sort(buf.begin(), buf.end(), RecordLess);
    fs::path path = tmp_dir_ / fmt::format("s{:05}-{:04}-p{:05}.run", st.split, st.spill_seq, p);
    std::string bytes;
    for (const auto& r : buf) {
      PutU32(bytes, static_cast<uint32_t>(r.key.size()));
      bytes += r.key;
      PutU32(bytes, static_cast<uint32_t>(r.value.size()));
      bytes += r.value;
    }
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw JobError(fmt::format("cannot write spill {}", path.string()));
    buf.clear();
    buf.shrink_to_fit();
    std::lock_guard lock(mu_);
    runs_[p].emplace_back(path);
    ++result_.spilled_runs;
  }
  ++st.spill_seq;
  st.buffered_bytes = 0;
}

void JobRunner::RunMapper(size_t split_index) {
  const InputSplit& split = spec_.splits[split_index];
  MapperState st;
  st.split = split_index;
  st.buffers.resize(spec_.partitions);
  st.loads.assign(spec_.partitions, 0);
  MapContext ctx(this, &st);
  std::unique_ptr<Mapper> mapper = spec_.make_mapper(spec_.broadcast);

  std::ifstream in(split.file, std::ios::binary);
  if (!in) throw JobError(fmt::format("cannot open input {}", split.file.string()));
  std::vector<char> iobuf(1 << 20);
  in.rdbuf()->pubsetbuf(iobuf.data(), static_cast<std::streamsize>(iobuf.size()));
  uint64_t pos = split.offset;
  const uint64_t end = split.offset + split.length;
  std::string line;
  if (split.offset > 0) {
    in.seekg(static_cast<std::streamoff>(split.offset - 1));
    char c = 0;
    in.get(c);
    if (c != '\n') {
      std::getline(in, line);
      pos += line.size() + 1;
    }
  }
  while (pos < end && std::getline(in, line)) {
    pos += line.size() + 1;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.empty()) continue;
    ++st.inputs;
    mapper->Map(view, ctx);
  }
  mapper->Cleanup(ctx);

  if (!spec_.make_reducer) {
    fs::path out = spec_.output_dir / fmt::format("part-m-{:05}", split_index);
    WriteFileAtomic(out, st.map_only_out);
  } else {
    uint64_t resident = resident_bytes_.fetch_add(st.buffered_bytes) + st.buffered_bytes;
    if (resident > spec_.shuffle_memory_bytes) {
      resident_bytes_.fetch_sub(st.buffered_bytes);
      Spill(st);
    } else {
      for (uint32_t p = 0; p < st.buffers.size(); ++p) {
        auto& buf = st.buffers[p];
        if (buf.empty()) continue;
        std::sort(buf.begin(), buf.end(), RecordLess);
        auto run = std::make_shared<std::vector<Record>>(std::move(buf));
        std::lock_guard lock(mu_);
        runs_[p].emplace_back(std::move(run));
      }
    }
  }

  std::lock_guard lock(mu_);
  for (uint32_t p = 0; p < spec_.partitions; ++p) result_.partition_loads[p] += st.loads[p];
  result_.map_emissions += st.emissions;
  result_.map_input_records += st.inputs;
  for (const auto& [k, v] : st.counters) result_.counters[k] += v;
}

void JobRunner::RunReducer(uint32_t partition) {
  ReducerState st;
  st.partition = partition;
  const fs::path final_path = spec_.output_dir / fmt::format("part-{:05}", partition);
  fs::path tmp_path = final_path;
  tmp_path += ".tmp";
  st.file.open(tmp_path, std::ios::binary | std::ios::trunc);
  if (!st.file) throw JobError(fmt::format("cannot write {}", tmp_path.string()));
  ReduceContext ctx(this, &st);
  std::unique_ptr<Reducer> reducer = spec_.make_reducer(partition, spec_.broadcast);

  std::vector<std::unique_ptr<RunReader>> readers;
  {
    std::lock_guard lock(mu_);
    for (const auto& run : runs_[partition]) readers.push_back(std::make_unique<RunReader>(run));
  }
  struct Head {
    Record rec;
    size_t source;
  };
  auto greater = [](const Head& a, const Head& b) { return RecordLess(b.rec, a.rec); };
  std::priority_queue<Head, std::vector<Head>, decltype(greater)> heap(greater);
  for (size_t i = 0; i < readers.size(); ++i) {
    Head h{{}, i};
    if (readers[i]->Next(h.rec)) heap.push(std::move(h));
  }
  uint64_t groups = 0;
  std::string key;
  std::vector<std::string> values;
  auto flush_group = [&] {
    if (values.empty()) return;
    reducer->Reduce(key, values, ctx);
    ++groups;
    values.clear();
  };
  while (!heap.empty()) {
    Head h = heap.top();
    heap.pop();
    if (values.empty() || h.rec.key != key) {
      flush_group();
      key = h.rec.key;
    }
    values.push_back(std::move(h.rec.value));
    Head next{{}, h.source};
    if (readers[h.source]->Next(next.rec)) heap.push(std::move(next));
  }
  flush_group();
  reducer->Finish(ctx);
  FlushReduce(st);
  st.file.close();
  if (!st.file) throw JobError(fmt::format("cannot finish {}", tmp_path.string()));
  fs::rename(tmp_path, final_path);

  {
    std::lock_guard lock(mu_);
    runs_[partition].clear();
    result_.reduce_groups += groups;
  }
  MergeCounters(st.counters);
}

void JobRunner::Cleanup(bool remove_outputs) {
  std::error_code ec;
  fs::remove_all(tmp_dir_, ec);
  if (!remove_outputs) return;
  if (!fs::is_directory(spec_.output_dir, ec)) return;
  for (const auto& entry : fs::directory_iterator(spec_.output_dir, ec)) {
    if (entry.path().filename().string().starts_with("part-")) fs::remove(entry.path(), ec);
  }
}

JobResult JobRunner::Run() {
  if (spec_.partitions == 0) throw JobError("partitions must be >= 1");
  if (spec_.workers == 0) throw JobError("workers must be >= 1");
  if (!spec_.make_mapper) throw JobError("job has no mapper");
  fs::create_directories(spec_.output_dir);
  tmp_dir_ = spec_.output_dir / fmt::format("_tmp-{}", ::getpid());
  Cleanup(/*remove_outputs=*/true);
  fs::create_directories(tmp_dir_);
  mapper_budget_ = std::max<uint64_t>(1, spec_.shuffle_memory_bytes / spec_.workers);
  runs_.assign(spec_.partitions, {});
  result_.partition_loads.assign(spec_.partitions, 0);

  try {
    ParallelFor(spec_.splits.size(), static_cast<int>(spec_.workers),
                [this](size_t i) { RunMapper(i); });
    if (spec_.make_reducer) {
      const int reduce_workers =
          static_cast<int>(std::min(spec_.workers, spec_.partitions));
      ParallelFor(spec_.partitions, reduce_workers,
                  [this](size_t p) { RunReducer(static_cast<uint32_t>(p)); });
    }
  } catch (const std::exception& e) {
    runs_.clear();
    Cleanup(/*remove_outputs=*/true);
    throw JobError(fmt::format("job failed: {}", e.what()),
                   dynamic_cast<const DataError*>(&e) != nullptr);
  }
  Cleanup(/*remove_outputs=*/false);
  result_.outputs = ListPartFiles(spec_.output_dir);
  return std::move(result_);
}

JobResult RunJob(const JobSpec& spec) { return JobRunner(spec).Run(); }

LoadStats ComputeLoadStats(std::span<const uint64_t> loads) {
  LoadStats s;
  if (loads.empty()) return s;
  double sum = 0;
  s.min = loads[0];
  s.max = loads[0];
  for (uint64_t l : loads) {
    sum += static_cast<double>(l);
    s.min = std::min(s.min, l);
    s.max = std::max(s.max, l);
  }
  s.avg = sum / static_cast<double>(loads.size());
  double var = 0;
  for (uint64_t l : loads) {
    const double d = static_cast<double>(l) - s.avg;
    var += d * d;
  }
  s.stddev = std::sqrt(var / static_cast<double>(loads.size()));
  return s;
}

}  // namespace flowcube::mr
