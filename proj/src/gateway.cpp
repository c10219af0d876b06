#include "fvla/gateway.hpp"

#include <atomic>
#include <cctype>
#include <charconv>
#include <deque>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <sodium.h>

#include "fvla/error.hpp"
#include "fvla/image.hpp"

namespace fvla::gateway {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

// ---------------------------------------------------------------- messages

json make_message(std::string_view type, const std::string& session_id, json payload) {
  json m;
  m["type"] = type;
  m["session_id"] = session_id;
  m["payload"] = std::move(payload);
  return m;
}

json hello_payload(const SessionConfig& config, int views, int horizon) {
  json p;
  p["protocol"] = kProtocol;
  p["seed"] = config.episode.seed;
  p["objects"] = config.episode.objects;
  p["instruction"] = config.episode.instruction;
  p["views"] = views;
  p["horizon"] = horizon;
  p["k_max"] = std::min(config.gate.k_max, horizon);
  p["max_env_steps"] = config.episode.max_env_steps;
  p["max_retries"] = config.gate.max_retries;
  p["tau0"] = config.gate.tau0;
  p["gamma"] = config.gate.gamma;
  p["tau_max"] = config.gate.tau_max;
  p["timeout_ms"] = config.timeout.count();
  p["corruption"] = config.corruption;
  p["mode"] = gen::to_string(config.mode);
  return p;
}

json state_payload(const env::EnvState& state, const hil::EpisodeResult& result, double tau) {
  json p;
  p["env_steps"] = result.env_steps;
  p["proposals"] = result.proposals;
  p["rejections"] = result.rejections;
  p["aborts"] = result.resample_aborts;
  p["temperature"] = tau;
  p["gripper"] = {state.gripper.x, state.gripper.y};
  p["grip"] = state.grip == env::Grip::Open ? "open" : "closed";
  p["held"] = state.held ? json(*state.held) : json(nullptr);
  json objects = json::array();
  for (const auto& o : state.objects)
    objects.push_back({{"id", o.id}, {"class", env::to_string(o.cls)}, {"pos", {o.pos.x, o.pos.y}}, {"binned", o.binned}});
  p["objects"] = std::move(objects);
  p["success"] = env::success(state);
  return p;
}

json proposal_payload(const hil::ProposalView& proposal) {
  if (!proposal.output) throw Error(ErrorCode::InvalidArgument, "proposal without generator output");
  const auto& out = *proposal.output;
  json p;
  p["proposal_id"] = proposal.proposal_id;
  p["k_max"] = proposal.k_max;
  p["temperature"] = proposal.temperature;
  p["views"] = out.views;
  p["horizon"] = out.horizon;

  json rows = json::array();
  double dx = 0.0, dy = 0.0;
  for (int t = 0; t < out.decoded_chunk.horizon; ++t) {
    json row = json::array();
    for (int d = 0; d < out.decoded_chunk.dims; ++d) row.push_back(out.decoded_chunk.at(t, d));
    rows.push_back(std::move(row));
    if (t < proposal.k_max) {
      const auto a = env::action_from_row(out.decoded_chunk, t);
      dx += a.dx;
      dy += a.dy;
    }
  }
  p["chunk"] = {{"actions", std::move(rows)}, {"displacement", {dx, dy}}};

  json phases = json::array();
  for (int id : out.unified.text_ids) phases.push_back(env::to_string(static_cast<env::Phase>(id)));
  p["phases"] = std::move(phases);

  json previews = json::array();
  for (int v = 0; v < out.views; ++v) {
    json view = json::array();
    for (int h = 0; h < out.horizon; ++h) view.push_back(base64_encode(encode_png(out.preview(v, h))));
    previews.push_back(std::move(view));
  }
  p["previews"] = std::move(previews);
  return p;
}

json error_payload(std::optional<int> proposal_id, const std::string& message) {
  json p;
  p["proposal_id"] = proposal_id ? json(*proposal_id) : json(nullptr);
  p["message"] = message;
  return p;
}

json episode_end_payload(const hil::EpisodeResult& result) {
  json p;
  p["success"] = result.success;
  p["env_steps"] = result.env_steps;
  p["proposals"] = result.proposals;
  p["rejections"] = result.rejections;
  p["aborts"] = result.resample_aborts;
  p["unrecoverable"] = result.unrecoverable;
  json decisions = json::array();
  for (const auto& d : result.decisions)
    decisions.push_back({{"proposal_id", d.proposal_id},
                         {"temperature", d.temperature},
                         {"k", d.decision.k},
                         {"reason", hil::to_string(d.decision.reason)}});
  p["decisions"] = std::move(decisions);
  return p;
}

json decision_payload(const hil::Decision& d) { return {{"proposal_id", d.proposal_id}, {"k", d.k}}; }

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(sodium_base64_ENCODED_LEN(bytes.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  out.resize(out.size() - 1);  // terminating NUL
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::vector<std::uint8_t> out(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  const char* end = nullptr;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len, &end,
                        sodium_base64_VARIANT_ORIGINAL) != 0 ||
      end != text.data() + text.size())
    throw Error(ErrorCode::FormatError, "invalid base64");
  out.resize(len);
  return out;
}

hil::Decision parse_decision(std::string_view line) {
  const json m = json::parse(line.begin(), line.end(), nullptr, false);
  if (m.is_discarded()) throw Error(ErrorCode::FormatError, "malformed JSON");
  if (!m.is_object()) throw Error(ErrorCode::FormatError, "message is not a JSON object");
  const auto type = m.find("type");
  if (type == m.end() || !type->is_string()) throw Error(ErrorCode::FormatError, "message without a type");
  if (*type != "decision") throw Error(ErrorCode::FormatError, "unexpected message type " + type->dump());
  const auto payload = m.find("payload");
  if (payload == m.end() || !payload->is_object()) throw Error(ErrorCode::FormatError, "decision without payload");
  auto integer = [&](const char* key) {
    const auto it = payload->find(key);
    if (it == payload->end() || !it->is_number_integer())
      throw Error(ErrorCode::FormatError, std::string("decision needs an integer ") + key);
    const auto v = it->get<std::int64_t>();
    if (v < INT32_MIN || v > INT32_MAX) throw Error(ErrorCode::FormatError, std::string(key) + " out of range");
    return static_cast<int>(v);
  };
  return {integer("proposal_id"), integer("k")};
}

// ---------------------------------------------------------------- session

OperatorSession::OperatorSession(std::string id, SessionConfig config, gen::CodecBundle codecs,
                                 hil::LoopResources resources, Sender send)
    : id_(std::move(id)),
      config_(std::move(config)),
      codecs_(std::move(codecs)),
      resources_(std::move(resources)),
      send_(std::move(send)) {
  config_.gate.verifier = hil::VerifierKind::Human;
  config_.gate.validate();
  if (!codecs_.actions || !codecs_.visual) throw Error(ErrorCode::InvalidArgument, "session needs both codecs");
}

void OperatorSession::emit(std::string_view type, json payload) {
  std::string line = make_message(type, id_, std::move(payload)).dump();
  std::lock_guard lock(send_mu_);
  send_(std::move(line));
}

std::optional<hil::EpisodeResult> OperatorSession::run() {
  try {
    gen::OracleConfig oc;
    oc.corruption = config_.corruption;
    oc.mode = config_.mode;
    oc.views = resources_.views;
    oc.horizon = codecs_.actions->horizon();
    oc.seed = config_.episode.seed ^ 0x9e3779b97f4a7c15ULL;
    gen::OracleGenerator generator(oc, codecs_);
    emit("hello", hello_payload(config_, oc.views, oc.horizon));

    hil::HumanVerifier verifier(*this, config_.timeout);
    hil::EpisodeHooks hooks{[this](const env::EnvState& state, const hil::EpisodeResult& result, double tau) {
      emit("state_update", state_payload(state, result, tau));
    }};
    auto result = hil::run_closed_loop(config_.episode, generator, verifier, config_.gate, resources_, hooks);
    emit("episode_end", episode_end_payload(result));
    return result;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SessionClosed) emit("error", error_payload(std::nullopt, e.what()));
  } catch (const std::exception& e) {
    emit("error", error_payload(std::nullopt, e.what()));
  }
  return std::nullopt;
}

void OperatorSession::receive(std::string_view frame) {
  std::size_t start = 0;
  while (start < frame.size()) {
    std::size_t end = frame.find('\n', start);
    if (end == std::string_view::npos) end = frame.size();
    std::string_view line = frame.substr(start, end - start);
    start = end + 1;
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.remove_suffix(1);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.front()))) line.remove_prefix(1);
    if (line.empty()) continue;
    try {
      channel_.push(parse_decision(line));
    } catch (const Error& e) {
      emit("error", error_payload(std::nullopt, e.what()));
      channel_.close();
      return;
    }
  }
}

void OperatorSession::close() { channel_.close(); }

void OperatorSession::send_proposal(const hil::ProposalView& proposal) { emit("proposal", proposal_payload(proposal)); }

void OperatorSession::send_error(int proposal_id, const std::string& message) {
  emit("error", error_payload(proposal_id, message));
}

// ---------------------------------------------------------------- server

std::optional<std::uint64_t> seed_from_target(std::string_view target) {
  const auto q = target.find('?');
  if (q == std::string_view::npos) return std::nullopt;
  std::string_view query = target.substr(q + 1);
  while (!query.empty()) {
    const auto amp = query.find('&');
    const std::string_view pair = query.substr(0, amp);
    query = amp == std::string_view::npos ? std::string_view{} : query.substr(amp + 1);
    if (pair.rfind("seed=", 0) != 0) continue;
    const std::string_view value = pair.substr(5);
    std::uint64_t seed = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), seed);
    if (ec != std::errc{} || ptr != value.data() + value.size())
      throw Error(ErrorCode::InvalidArgument, "bad seed in '" + std::string(target) + "'");
    return seed;
  }
  return std::nullopt;
}

namespace {

class Connection;

}  // namespace

struct Server::Impl {
  ServeConfig config;
  gen::CodecBundle codecs;
  hil::LoopResources resources;
  net::io_context ioc{1};
  tcp::acceptor acceptor{ioc};

  std::mutex mu;
  bool stopped = false;
  std::uint64_t sessions_started = 0;
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
    std::weak_ptr<OperatorSession> session;
  };
  std::vector<Worker> workers;

  void accept();
  void start_session(std::shared_ptr<Connection> conn, std::optional<std::uint64_t> seed);
};

namespace {

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  using OpenHandler = std::function<void(std::shared_ptr<Connection>, std::optional<std::uint64_t> seed)>;

  Connection(tcp::socket socket, OpenHandler on_open) : ws_(std::move(socket)), on_open_(std::move(on_open)) {}

  void start() {
    http::async_read(ws_.next_layer(), buffer_, request_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_request(ec); });
  }

  void attach(std::shared_ptr<OperatorSession> session) { session_ = std::move(session); }

  /// Thread-safe: queues one line for delivery.
  void send(std::string line) {
    line.push_back('\n');
    net::post(ws_.get_executor(), [self = shared_from_this(), line = std::move(line)]() mutable {
      if (self->closed_) return;
      self->queue_.push_back(std::move(line));
      if (!self->writing_) self->write_next();
    });
  }

  /// Thread-safe: closes the socket once everything queued is written.
  void finish() {
    net::post(ws_.get_executor(), [self = shared_from_this()] {
      self->closing_ = true;
      if (!self->writing_) self->close_now();
    });
  }

 private:
  void on_request(beast::error_code ec) {
    if (ec || !websocket::is_upgrade(request_)) return;
    std::optional<std::uint64_t> seed;
    try {
      const auto target = request_.target();
      seed = seed_from_target(std::string_view(target.data(), target.size()));
    } catch (const Error&) {
      return;
    }
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.read_message_max(1 << 20);
    ws_.async_accept(request_, [self = shared_from_this(), seed](beast::error_code ec) {
      if (ec) return;
      self->on_open_(self, seed);
      self->read();
    });
  }

  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->closed_ = true;
        if (self->session_) self->session_->close();
        return;
      }
      const std::string frame = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      if (self->session_) self->session_->receive(frame);
      self->read();
    });
  }

  void write_next() {
    if (queue_.empty()) {
      writing_ = false;
      if (closing_) close_now();
      return;
    }
    writing_ = true;
    ws_.text(true);
    ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->closed_ = true;
        self->queue_.clear();
        self->writing_ = false;
        if (self->session_) self->session_->close();
        return;
      }
      self->queue_.pop_front();
      self->write_next();
    });
  }

  void close_now() {
    if (closed_) return;
    closed_ = true;
    ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
  }

  websocket::stream<beast::tcp_stream> ws_;
  OpenHandler on_open_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> request_;
  std::shared_ptr<OperatorSession> session_;
  std::deque<std::string> queue_;
  bool writing_ = false;
  bool closing_ = false;
  bool closed_ = false;
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;  // listener closed
    std::make_shared<Connection>(std::move(socket), [this](std::shared_ptr<Connection> conn,
                                                           std::optional<std::uint64_t> seed) {
      start_session(std::move(conn), seed);
    })->start();
    accept();
  });
}

void Server::Impl::start_session(std::shared_ptr<Connection> conn, std::optional<std::uint64_t> seed) {
  std::lock_guard lock(mu);
  if (stopped) return;
  const std::uint64_t n = ++sessions_started;
  SessionConfig sc = config.session;
  sc.episode.seed = seed ? *seed : config.base_seed + n - 1;
  auto session = std::make_shared<OperatorSession>("s" + std::to_string(n), std::move(sc), codecs, resources,
                                                   [weak = std::weak_ptr<Connection>(conn)](std::string line) {
                                                     if (auto c = weak.lock()) c->send(std::move(line));
                                                   });
  conn->attach(session);
  std::erase_if(workers, [](Worker& w) {
    if (!w.done->load()) return false;
    w.thread.join();
    return true;
  });
  auto done = std::make_shared<std::atomic<bool>>(false);
  workers.push_back({std::thread([conn, session, done] {
                       session->run();
                       conn->finish();
                       done->store(true);
                     }),
                     done, session});
}

Server::Server(ServeConfig config, gen::CodecBundle codecs, hil::LoopResources resources)
    : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  impl_->codecs = std::move(codecs);
  impl_->resources = std::move(resources);
  impl_->config.session.gate.validate();
  try {
    const tcp::endpoint endpoint(net::ip::make_address(impl_->config.address), impl_->config.port);
    impl_->acceptor.open(endpoint.protocol());
    impl_->acceptor.set_option(net::socket_base::reuse_address(true));
    impl_->acceptor.bind(endpoint);
    impl_->acceptor.listen(net::socket_base::max_listen_connections);
  } catch (const boost::system::system_error& e) {
    throw Error(ErrorCode::BindError,
                impl_->config.address + ":" + std::to_string(impl_->config.port) + ": " + e.code().message());
  }
}

Server::~Server() { stop(); }

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::run() {
  impl_->accept();
  impl_->ioc.run();
}

void Server::stop() {
  std::vector<Impl::Worker> workers;
  {
    std::lock_guard lock(impl_->mu);
    if (impl_->stopped) return;
    impl_->stopped = true;
    for (auto& w : impl_->workers)
      if (auto s = w.session.lock()) s->close();
    workers.swap(impl_->workers);
  }
  net::post(impl_->ioc, [impl = impl_.get()] {
    beast::error_code ec;
    impl->acceptor.close(ec);
  });
  for (auto& w : workers) w.thread.join();
  impl_->ioc.stop();
}

}  // namespace fvla::gateway
