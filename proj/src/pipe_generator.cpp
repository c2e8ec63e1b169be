#include "finecount/pipe_generator.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <mutex>

#include <json.hpp>

#include "finecount/error.hpp"

namespace finecount {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'A', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  const std::uint8_t* bytes(std::size_t n) {
    need(n);
    const std::uint8_t* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(ErrorKind::kParse, "attention frame truncated");
  }
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xffffffffULL) throw Error(ErrorKind::kInvalidArgument, "frame field overflows u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_generation(const Generation& g) {
  const auto& a = g.attention;
  a.validate();
  if (g.image.pixels.size() != g.image.height * g.image.width * 3) {
    throw Error(ErrorKind::kInvalidArgument, "image buffer does not match dimensions");
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kAttentionFrameVersion);
  put_u32(out, checked_u32(g.image.height));
  put_u32(out, checked_u32(g.image.width));
  put_u32(out, checked_u32(a.layers));
  put_u32(out, checked_u32(a.heads));
  put_u32(out, checked_u32(a.text_tokens));
  put_u32(out, checked_u32(a.grid.rows));
  put_u32(out, checked_u32(a.grid.cols));
  put_u32(out, checked_u32(g.words.size()));
  for (int id : a.block_ids) put_u32(out, static_cast<std::uint32_t>(id));
  for (const auto& w : g.words) {
    put_u32(out, checked_u32(w.tokens.begin));
    put_u32(out, checked_u32(w.tokens.end));
    put_u32(out, checked_u32(w.word.size()));
    out.insert(out.end(), w.word.begin(), w.word.end());
  }
  out.insert(out.end(), g.image.pixels.begin(), g.image.pixels.end());
  for (float v : a.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Generation decode_generation(const std::vector<std::uint8_t>& frame) {
  Reader r(frame);
  if (std::memcmp(r.bytes(4), kMagic, 4) != 0) {
    throw Error(ErrorKind::kParse, "attention frame has bad magic");
  }
  if (const auto version = r.u32(); version != kAttentionFrameVersion) {
    throw Error(ErrorKind::kParse, "unsupported attention frame version " + std::to_string(version));
  }
  Generation g;
  const std::size_t height = r.u32();
  const std::size_t width = r.u32();
  const std::size_t layers = r.u32();
  const std::size_t heads = r.u32();
  const std::size_t text_tokens = r.u32();
  const GridShape grid{r.u32(), r.u32()};
  const std::size_t words = r.u32();
  std::vector<int> blocks(layers);
  for (auto& b : blocks) b = static_cast<int>(r.u32());
  for (std::size_t i = 0; i < words; ++i) {
    WordSpan w;
    w.tokens.begin = r.u32();
    w.tokens.end = r.u32();
    const std::size_t len = r.u32();
    const auto* p = r.bytes(len);
    w.word.assign(reinterpret_cast<const char*>(p), len);
    if (w.tokens.empty() || w.tokens.end > text_tokens) {
      throw Error(ErrorKind::kParse, "word token range outside text tokens");
    }
    g.words.push_back(std::move(w));
  }
  g.image = RgbImage(height, width);
  const auto* pix = r.bytes(g.image.pixels.size());
  std::copy(pix, pix + g.image.pixels.size(), g.image.pixels.begin());
  g.attention = AttentionStack(std::move(blocks), heads, text_tokens, grid);
  for (auto& v : g.attention.values) v = std::bit_cast<float>(r.u32());
  if (!r.done()) throw Error(ErrorKind::kParse, "trailing bytes after attention frame");
  g.attention.validate();
  return g;
}

std::string encode_generation_request(const std::string& prompt, std::uint64_t seed) {
  return nlohmann::json{{"prompt", prompt}, {"seed", seed}}.dump() + "\n";
}

PipeGenerator::PipeGenerator(std::vector<std::string> argv, GeneratorCapabilities capabilities)
    : argv_(std::move(argv)), capabilities_(std::move(capabilities)) {
  if (argv_.empty()) throw Error(ErrorKind::kInvalidArgument, "generator command is empty");
}

Generation PipeGenerator::generate(const std::string& prompt, std::uint64_t seed) {
  int to_child[2];
  int from_child[2];
  if (pipe2(to_child, O_CLOEXEC) != 0) {
    throw Error(ErrorKind::kBackend, std::string("pipe: ") + std::strerror(errno));
  }
  if (pipe2(from_child, O_CLOEXEC) != 0) {
    close(to_child[0]);
    close(to_child[1]);
    throw Error(ErrorKind::kBackend, std::string("pipe: ") + std::strerror(errno));
  }
  std::vector<char*> args;
  for (auto& a : argv_) args.push_back(a.data());
  args.push_back(nullptr);

  const pid_t pid = fork();
  if (pid < 0) {
    for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) close(fd);
    throw Error(ErrorKind::kBackend, std::string("fork: ") + std::strerror(errno));
  }
  if (pid == 0) {
    dup2(to_child[0], STDIN_FILENO);
    dup2(from_child[1], STDOUT_FILENO);
    execvp(args[0], args.data());
    _exit(127);
  }
  close(to_child[0]);
  close(from_child[1]);

  // The request is small; write it fully before reading so the child never
  // blocks on a full stdout pipe while we block on its stdin.
  const std::string request = encode_generation_request(prompt, seed);
  static std::once_flag ignore_sigpipe;
  std::call_once(ignore_sigpipe, [] { signal(SIGPIPE, SIG_IGN); });
  std::size_t written = 0;
  while (written < request.size()) {
    const ssize_t n = write(to_child[1], request.data() + written, request.size() - written);
    if (n <= 0) break;
    written += static_cast<std::size_t>(n);
  }
  close(to_child[1]);

  std::vector<std::uint8_t> frame;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const ssize_t n = read(from_child[0], buf, sizeof(buf));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    frame.insert(frame.end(), buf, buf + n);
  }
  close(from_child[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw Error(ErrorKind::kBackend, "generator process '" + argv_.front() + "' exited with status " +
                                         std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));
  }
  Generation g = decode_generation(frame);
  if ((capabilities_.image_height != 0 && g.image.height != capabilities_.image_height) ||
      (capabilities_.image_width != 0 && g.image.width != capabilities_.image_width)) {
    throw Error(ErrorKind::kCapability,
                "generator returned " + std::to_string(g.image.height) + "x" +
                    std::to_string(g.image.width) + " image, expected " +
                    std::to_string(capabilities_.image_height) + "x" +
                    std::to_string(capabilities_.image_width));
  }
  return g;
}

}  // namespace finecount
