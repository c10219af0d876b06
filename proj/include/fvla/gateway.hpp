#pragma once

// Operator sessions over WebSocket. Every frame carries newline-delimited JSON
// objects {"type", "session_id", "payload"}; the server speaks hello,
// state_update, proposal, error and episode_end, the client answers with
// decision {proposal_id, k}.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fvla/hil_gate.hpp"

namespace fvla::gateway {

using json = nlohmann::ordered_json;

inline constexpr std::string_view kProtocol = "fvla-operator/1";

struct SessionConfig {
  hil::EpisodeConfig episode;
  hil::GateConfig gate;
  double corruption = 0.0;
  gen::CorruptionMode mode = gen::CorruptionMode::BinSwap;
  std::chrono::milliseconds timeout = std::chrono::seconds(60);
};

// ---------------------------------------------------------------- messages

json make_message(std::string_view type, const std::string& session_id, json payload);
json hello_payload(const SessionConfig& config, int views, int horizon);
json state_payload(const env::EnvState& state, const hil::EpisodeResult& result, double tau);
/// Chunk summary, phases and the V x H_a decoded previews as base64 PNG.
json proposal_payload(const hil::ProposalView& proposal);
json error_payload(std::optional<int> proposal_id, const std::string& message);
json episode_end_payload(const hil::EpisodeResult& result);
json decision_payload(const hil::Decision& d);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// FormatError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Parses one client line. FormatError for anything that is not a decision
/// object with integer proposal_id and k.
hil::Decision parse_decision(std::string_view line);

// ---------------------------------------------------------------- session

/// One operator, one episode. The transport feeds received text through
/// receive() and delivers every string handed to `send`; run() drives the
/// closed loop on the caller's thread with a human verifier.
class OperatorSession final : public hil::OperatorLink {
 public:
  using Sender = std::function<void(std::string line)>;

  OperatorSession(std::string id, SessionConfig config, gen::CodecBundle codecs, hil::LoopResources resources,
                  Sender send);

  /// Sends hello, runs the episode, sends episode_end. Returns the result, or
  /// nullopt when the operator went away or the session failed.
  std::optional<hil::EpisodeResult> run();

  /// One transport frame: newline-separated JSON objects. A line that is not a
  /// valid decision gets an error reply and ends the session.
  void receive(std::string_view frame);
  /// Transport closed; a pending decision wait ends with SessionClosed.
  void close();

  const std::string& id() const { return id_; }

  void send_proposal(const hil::ProposalView& proposal) override;
  void send_error(int proposal_id, const std::string& message) override;
  hil::DecisionChannel& decisions() override { return channel_; }

 private:
  void emit(std::string_view type, json payload);

  std::string id_;
  SessionConfig config_;
  gen::CodecBundle codecs_;
  hil::LoopResources resources_;
  Sender send_;
  std::mutex send_mu_;
  hil::DecisionChannel channel_;
};

// ---------------------------------------------------------------- server

struct ServeConfig {
  std::string address = "127.0.0.1";
  unsigned short port = 8080;  // 0 picks a free port
  SessionConfig session;
  /// Episode seed of session n (1-based) unless the client asks for ?seed=<s>.
  std::uint64_t base_seed = 0;
};

/// Accepts WebSocket clients and runs one OperatorSession per connection on
/// its own thread. Sessions share nothing mutable; a failing session only
/// closes its own connection. BindError if the address cannot be bound.
class Server {
 public:
  Server(ServeConfig config, gen::CodecBundle codecs, hil::LoopResources resources);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  /// Serves until stop(); safe to call from one thread only.
  void run();
  /// Closes the listener and every session, then returns; run() exits.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Parses "?seed=<n>" out of a request target.
std::optional<std::uint64_t> seed_from_target(std::string_view target);

}  // namespace fvla::gateway
