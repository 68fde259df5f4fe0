#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>
#include <thread>

#include "anpd/wire.hpp"

namespace {

using namespace anpd;
using namespace std::chrono_literals;

using Seq = TokenSequence;

Seq random_seq(std::mt19937& rng, std::size_t len, int vocab) {
  Seq s(len);
  for (auto& t : s) t = TokenId(rng() % unsigned(vocab));
  return s;
}

MarkovParams test_params() {
  std::mt19937 rng(1);
  return {random_seq(rng, 500, 24), 2, 13, 32, TokenId{31}};
}

// In-process server on an ephemeral port, torn down with the fixture.
class ServerFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    server_ = std::make_unique<OracleServer>(
        "127.0.0.1:0", [] { return std::make_unique<MarkovOracle>(test_params()); }, &log_);
    thread_ = std::thread([this] { server_->serve(); });
  }

  void TearDown() override {
    server_->stop();
    thread_.join();
  }

  std::string endpoint() const { return "127.0.0.1:" + std::to_string(server_->port()); }

  std::ostringstream log_;
  std::unique_ptr<OracleServer> server_;
  std::thread thread_;
};

TEST_F(ServerFixture, InfoReportsVocabAndEos) {
  auto o = ExternalOracle::connect(endpoint());
  EXPECT_EQ(o->info().vocab_size, 32u);
  EXPECT_EQ(o->info().eos, 31);
}

TEST_F(ServerFixture, DifferentialAgainstInProcess) {
  std::mt19937 rng(17);
  auto remote = ExternalOracle::connect(endpoint());
  MarkovOracle local(test_params());
  for (int step = 0; step < 300; ++step) {
    if (rng() % 10 == 0) {
      remote->reset();
      local.reset();
      ASSERT_EQ(remote->consumed_len(), 0u);
      continue;
    }
    const Seq chunk = random_seq(rng, 1 + rng() % 12, 32);
    ASSERT_EQ(remote->extend(chunk), local.extend(chunk));
    ASSERT_EQ(remote->consumed_len(), local.consumed_len());
  }
}

TEST_F(ServerFixture, ConnectionsAreIsolated) {
  auto a = ExternalOracle::connect(endpoint());
  auto b = ExternalOracle::connect(endpoint());
  MarkovOracle local(test_params());
  a->extend(Seq{1, 2, 3, 4, 5});
  EXPECT_EQ(b->extend(Seq{7}), local.extend(Seq{7}));
}

TEST_F(ServerFixture, MalformedRequestKeepsConnectionOpen) {
  auto ch = net::connect(endpoint(), 5s);
  ch.write_line("{not json");
  auto reply = nlohmann::json::parse(*ch.read_line());
  EXPECT_FALSE(reply["ok"].get<bool>());
  EXPECT_TRUE(reply.contains("error"));

  ch.write_line(R"({"op":"frobnicate"})");
  EXPECT_FALSE(nlohmann::json::parse(*ch.read_line())["ok"].get<bool>());

  ch.write_line(R"({"op":"extend","tokens":[]})");
  EXPECT_FALSE(nlohmann::json::parse(*ch.read_line())["ok"].get<bool>());

  ch.write_line(R"({"op":"reset"})");
  EXPECT_EQ(nlohmann::json::parse(*ch.read_line()), (nlohmann::json{{"ok", true}}));

  ch.write_line(R"({"op":"extend","tokens":[3,4]})");
  reply = nlohmann::json::parse(*ch.read_line());
  EXPECT_TRUE(reply["ok"].get<bool>());
  EXPECT_EQ(reply["predictions"].size(), 2u);
}

TEST_F(ServerFixture, LogsOneLinePerConnection) {
  {
    auto o = ExternalOracle::connect(endpoint());
    o->extend(Seq{1});
  }
  server_->stop();
  thread_.join();
  thread_ = std::thread([] {});
  const std::string text = log_.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1) << text;
  EXPECT_NE(text.find("after 2 requests"), std::string::npos) << text;
}

TEST(HandleRequest, InfoWithoutEos) {
  MarkovOracle o({Seq{1, 2, 3}, 1, 0});
  const auto r = OracleServer::handle_request(o, R"({"op":"info"})");
  EXPECT_EQ(r["vocab_size"], 4);
  EXPECT_EQ(r["eos"], -1);
}

TEST(HandleRequest, NegativeTokenRejected) {
  MarkovOracle o({Seq{1, 2, 3}, 1, 0});
  const auto r = OracleServer::handle_request(o, R"({"op":"extend","tokens":[-1]})");
  EXPECT_FALSE(r["ok"].get<bool>());
  EXPECT_EQ(o.consumed_len(), 0u);
}

// Scripted peer: answers the info handshake, then replies to the next
// request with `second_reply`, or hangs up when it is empty.
class FakeServer {
 public:
  explicit FakeServer(std::string second_reply) : listener_("127.0.0.1:0") {
    thread_ = std::thread([this, reply = std::move(second_reply)] {
      auto ch = listener_.accept(stop_);
      if (!ch) return;
      ch->read_line();
      ch->write_line(R"({"ok":true,"vocab_size":8,"eos":-1})");
      ch->read_line();
      if (!reply.empty()) {
        ch->write_line(reply);
        ch->read_line();
      }
    });
  }
  ~FakeServer() {
    stop_ = true;
    thread_.join();
  }
  std::string endpoint() const { return "127.0.0.1:" + std::to_string(listener_.port()); }

 private:
  net::Listener listener_;
  std::atomic<bool> stop_{false};
  std::thread thread_;
};

OracleError::Kind extend_error(const std::string& reply, std::string* what = nullptr) {
  FakeServer fake(reply);
  auto o = ExternalOracle::connect(fake.endpoint(), 5s);
  EXPECT_FALSE(o->info().eos);
  try {
    o->extend(Seq{1, 2});
  } catch (const OracleError& e) {
    if (what) *what = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "extend did not fail";
  return OracleError::Kind::remote;
}

TEST(ExternalErrors, MalformedReplyIsProtocolError) {
  EXPECT_EQ(extend_error("this is not json"), OracleError::Kind::protocol);
  EXPECT_EQ(extend_error(R"({"predictions":[1,2]})"), OracleError::Kind::protocol);
  EXPECT_EQ(extend_error(R"({"ok":true,"predictions":[1]})"), OracleError::Kind::protocol);
}

TEST(ExternalErrors, RemoteRejection) {
  EXPECT_EQ(extend_error(R"({"ok":false,"error":"nope"})"), OracleError::Kind::remote);
}

TEST(ExternalErrors, ServerCloseIsTransportErrorWithPosition) {
  std::string what;
  EXPECT_EQ(extend_error("", &what), OracleError::Kind::transport);
  EXPECT_NE(what.find("after 0 consumed tokens"), std::string::npos) << what;
}

TEST(ExternalErrors, ConnectRefused) {
  int port = 0;
  { port = net::Listener("127.0.0.1:0").port(); }
  try {
    ExternalOracle::connect("127.0.0.1:" + std::to_string(port), 1s);
    FAIL();
  } catch (const OracleError& e) {
    EXPECT_EQ(e.kind(), OracleError::Kind::connect);
  }
}

}  // namespace
