#include <catch2/catch_amalgamated.hpp>

#include "sesa/semantics.hpp"

#include <filesystem>
#include <fstream>

using namespace sesa;

namespace {

const char* kExampleCaption =
    "In the image, the person is holding a pink umbrella with one hand and appears to be "
    "smiling while looking towards the camera...";

const char* kExampleRecordJson = R"({
  "key_entities": "person, umbrella",
  "pose": "standing casually",
  "action": "appears to be smiling while looking towards the camera",
  "hand_action": "One hand is holding a pink umbrella and wraps around the handle...",
  "env": "possibly at sunny beach"
})";

FewShotExample example_pair() {
    return {kExampleCaption, kExampleRecordJson};
}

struct FixtureFile {
    std::filesystem::path path;
    nlohmann::json fixtures = nlohmann::json::object();

    explicit FixtureFile(const std::string& name) {
        path = std::filesystem::temp_directory_path() / name;
        flush();
    }
    ~FixtureFile() { std::filesystem::remove(path); }

    void add(const nlohmann::json& body, const nlohmann::json& response) {
        fixtures[request_hash(body)] = response;
        flush();
    }
    void flush() const {
        std::ofstream f(path);
        f << fixtures.dump();
    }
    std::string url() const { return "mock:" + path.string(); }
};

ModelEndpoint mock_endpoint(const FixtureFile& fx, EndpointRole role) {
    ModelEndpoint ep;
    ep.base_url = fx.url();
    ep.role = role;
    return ep;
}

std::filesystem::path write_temp_image(const std::string& name, const std::string& bytes) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::ofstream f(p, std::ios::binary);
    f << bytes;
    return p;
}

}  // namespace

TEST_CASE("caption returns the fixture text verbatim and logs the request") {
    FixtureFile fx("sesa_sem_caption.json");
    ModelEndpoint ep = mock_endpoint(fx, EndpointRole::Captioner);
    auto img = write_temp_image("sesa_sem_img.pgm", "fakebytes");

    std::ifstream f(img, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto body = request_body(ep, build_caption_messages(sesa::detail::base64_encode(bytes)));
    fx.add(body, kExampleCaption);

    Client client;
    CHECK(caption(img.string(), ep, client) == kExampleCaption);
    REQUIRE(client.log.size() == 1);
    CHECK(client.log[0].status == 200);
    CHECK(client.log[0].attempt == 1);
    CHECK(client.log[0].hash == request_hash(body));

    CHECK_THROWS_AS(caption("/nonexistent.pgm", ep, client), IoError);
    ModelEndpoint wrong_role = ep;
    wrong_role.role = EndpointRole::Extractor;
    CHECK_THROWS_AS(caption(img.string(), wrong_role, client), InvalidRange);
    std::filesystem::remove(img);
}

TEST_CASE("retry budget is respected exactly") {
    FixtureFile fx("sesa_sem_retry.json");
    ModelEndpoint ep = mock_endpoint(fx, EndpointRole::Captioner);
    ep.retries = 2;
    auto msgs = build_caption_messages("xyz");
    fx.add(request_body(ep, msgs), nlohmann::json{{"status", 503}});

    Client client;
    try {
        client.chat(ep, msgs);
        FAIL("expected NetworkError");
    } catch (const NetworkError& e) {
        CHECK(e.status == 503);
        CHECK(std::string(e.what()).find("3 attempts") != std::string::npos);
    }
    REQUIRE(client.log.size() == 3);
    for (int i = 0; i < 3; i++) {
        CHECK(client.log[static_cast<size_t>(i)].attempt == i + 1);
        CHECK(client.log[static_cast<size_t>(i)].status == 503);
    }

    // missing fixture behaves like an unreachable endpoint
    ModelEndpoint ep0 = ep;
    ep0.retries = 0;
    Client c2;
    CHECK_THROWS_AS(c2.chat(ep0, build_caption_messages("unknown")), NetworkError);
    CHECK(c2.log.size() == 1);
}

TEST_CASE("empty fixture content raises EmptyResponse") {
    FixtureFile fx("sesa_sem_empty.json");
    ModelEndpoint ep = mock_endpoint(fx, EndpointRole::Captioner);
    auto msgs = build_caption_messages("abc");
    fx.add(request_body(ep, msgs), "");
    Client client;
    CHECK_THROWS_AS(client.chat(ep, msgs), EmptyResponse);
}

TEST_CASE("endpoint validation") {
    ModelEndpoint bad;
    bad.base_url = "mock:/tmp/x";
    bad.retries = -1;
    Client client;
    CHECK_THROWS_AS(client.chat(bad, {}), InvalidRange);
    bad.retries = 0;
    bad.timeout_seconds = 0.0;
    CHECK_THROWS_AS(client.chat(bad, {}), InvalidRange);
}

TEST_CASE("extract parses the few-shot example output into a record") {
    FixtureFile fx("sesa_sem_extract.json");
    ModelEndpoint ep = mock_endpoint(fx, EndpointRole::Extractor);
    FewShotExample shot = example_pair();
    auto msgs = build_extract_messages(kExampleCaption, shot.input, shot.output);
    fx.add(request_body(ep, msgs), kExampleRecordJson);

    Client client;
    int repairs = -1;
    SemanticsRecord r = extract(kExampleCaption, shot, ep, client, &repairs);
    CHECK(repairs == 0);
    CHECK(r.key_entities == "person, umbrella");
    CHECK(r.pose == "standing casually");
    CHECK(r.action == "appears to be smiling while looking towards the camera");
    CHECK(r.hand_action == "One hand is holding a pink umbrella and wraps around the handle...");
    CHECK(r.env == "possibly at sunny beach");
}

TEST_CASE("extract repairs once on malformed JSON") {
    FixtureFile fx("sesa_sem_repair.json");
    ModelEndpoint ep = mock_endpoint(fx, EndpointRole::Extractor);
    FewShotExample shot = example_pair();
    auto msgs = build_extract_messages("a caption", shot.input, shot.output);
    fx.add(request_body(ep, msgs), "not json");

    // the repair request embeds the parse error; reconstruct it to key the fixture
    std::string parse_error;
    try {
        sesa::detail::parse_record("not json", 512);
    } catch (const MalformedJson& e) {
        parse_error = e.what();
    }
    auto repair_msgs = msgs;
    repair_msgs.push_back({"assistant", "not json"});
    repair_msgs.push_back({"user", std::string("Your reply failed to parse: ") + parse_error +
                                       ". Respond again with only the JSON object."});
    fx.add(request_body(ep, repair_msgs), kExampleRecordJson);

    Client client;
    int repairs = -1;
    SemanticsRecord r = extract("a caption", shot, ep, client, &repairs);
    CHECK(repairs == 1);
    CHECK(r.env == "possibly at sunny beach");
    CHECK(client.log.size() == 2);

    // a second malformed reply fails for good
    fx.add(request_body(ep, repair_msgs), "{ still broken");
    Client c2;
    CHECK_THROWS_AS(extract("a caption", shot, ep, c2, nullptr), MalformedJson);
}

TEST_CASE("schema violations") {
    size_t cap = 512;
    CHECK_THROWS_AS(sesa::detail::parse_record("[]", cap), MalformedJson);
    // valid JSON but missing env
    nlohmann::json missing{{"key_entities", "a"},
                           {"pose", "b"},
                           {"action", "c"},
                           {"hand_action", "d"}};
    try {
        sesa::detail::parse_record(missing.dump(), cap);
        FAIL("expected MissingField");
    } catch (const MissingField& e) {
        CHECK(e.name == "env");
    }
    nlohmann::json extra = nlohmann::json::parse(R"({
        "key_entities":"a","pose":"b","action":"c","hand_action":"d","env":"e","bonus":"f"})");
    CHECK_THROWS_AS(sesa::detail::parse_record(extra.dump(), cap), MalformedJson);
    nlohmann::json empty_hand = nlohmann::json::parse(R"({
        "key_entities":"a","pose":"b","action":"c","hand_action":"","env":"e"})");
    CHECK_THROWS_AS(sesa::detail::parse_record(empty_hand.dump(), cap), MissingField);
    nlohmann::json long_field = nlohmann::json::parse(R"({
        "key_entities":"a","pose":"b","action":"c","hand_action":"d","env":"e"})");
    long_field["env"] = std::string(1000, 'x');
    CHECK_THROWS_AS(sesa::detail::parse_record(long_field.dump(), cap), InvalidRange);
    nlohmann::json non_string = nlohmann::json::parse(R"({
        "key_entities":1,"pose":"b","action":"c","hand_action":"d","env":"e"})");
    CHECK_THROWS_AS(sesa::detail::parse_record(non_string.dump(), cap), MalformedJson);
}

TEST_CASE("compose joins four fields with the separator contract") {
    SemanticsRecord r{"k", "x", "x", "x", "x"};
    CHECK(compose(r).final_text == "x. x. x. x");

    // key_entities never appears in the final text
    r.key_entities = "should not appear";
    CHECK(compose(r).final_text.find("should not appear") == std::string::npos);

    // trailing-period dedup: a field ending in '.' gets a bare space join
    SemanticsRecord dots{"", "ends here.", "next", "more", "env"};
    CHECK(compose(dots).final_text == "ends here. next. more. env");

    // newlines and runs of spaces collapse
    SemanticsRecord messy{"", "a\n b", "c   d", "e", "f"};
    CHECK(compose(messy).final_text == "a b. c d. e. f");

    // empty fields are skipped
    SemanticsRecord sparse{"", "", "only action", "", "somewhere"};
    CHECK(compose(sparse).final_text == "only action. somewhere");
}

TEST_CASE("compose on the example record matches the documented join") {
    nlohmann::json j = nlohmann::json::parse(kExampleRecordJson);
    SemanticsRecord r{j["key_entities"], j["pose"], j["action"], j["hand_action"], j["env"]};
    PromptComposition pc = compose(r);
    CHECK(pc.final_text ==
          "standing casually. appears to be smiling while looking towards the camera. "
          "One hand is holding a pink umbrella and wraps around the handle... "
          "possibly at sunny beach");
    // round-trip: splitting on ". " recovers the separator-free fields
    CHECK(pc.final_text.find("standing casually. ") == 0);
}

TEST_CASE("build_dataset writes an ordered manifest and tolerates failures") {
    FixtureFile fx("sesa_sem_dataset.json");
    ModelEndpoint cap_ep = mock_endpoint(fx, EndpointRole::Captioner);
    cap_ep.retries = 0;
    ModelEndpoint ext_ep = mock_endpoint(fx, EndpointRole::Extractor);
    ext_ep.retries = 0;
    FewShotExample shot = example_pair();

    std::vector<std::string> images;
    for (int i = 0; i < 3; i++) {
        auto p = write_temp_image("sesa_sem_ds_" + std::to_string(i) + ".bin",
                                  "img" + std::to_string(i));
        images.push_back(p.string());
        auto cap_body = request_body(
            cap_ep, build_caption_messages(sesa::detail::base64_encode("img" + std::to_string(i))));
        std::string cap_text = "caption " + std::to_string(i);
        fx.add(cap_body, cap_text);
        auto ext_body = request_body(ext_ep, build_extract_messages(cap_text, shot.input,
                                                                    shot.output));
        if (i == 1) {
            // extractor returns malformed JSON and the repair fixture is absent
            fx.add(ext_body, "broken");
        } else {
            nlohmann::json rec{{"key_entities", "hand"},
                               {"pose", "p" + std::to_string(i)},
                               {"action", "a" + std::to_string(i)},
                               {"hand_action", "h" + std::to_string(i)},
                               {"env", "e" + std::to_string(i)}};
            fx.add(ext_body, rec.dump());
        }
    }

    auto manifest = std::filesystem::temp_directory_path() / "sesa_sem_manifest.jsonl";
    Client client;
    auto entries = build_dataset(images, cap_ep, ext_ep, shot, manifest.string(), client);
    REQUIRE(entries.size() == 3);
    CHECK(entries[0].status == "ok");
    CHECK(entries[1].status == "error");
    CHECK(entries[2].status == "ok");
    CHECK(entries[2].final_prompt == "p2. a2. h2. e2");

    auto read_all = [&] {
        std::ifstream f(manifest, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
    };
    std::string first = read_all();
    // three JSON lines in input order
    std::istringstream is(first);
    std::string line;
    int count = 0;
    while (std::getline(is, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j["image"] == images[static_cast<size_t>(count)]);
        count++;
    }
    CHECK(count == 3);

    // rerun with identical fixtures -> byte-identical manifest
    Client c2;
    build_dataset(images, cap_ep, ext_ep, shot, manifest.string(), c2);
    CHECK(read_all() == first);

    // parallel run produces the same ordered manifest
    Client c3;
    build_dataset(images, cap_ep, ext_ep, shot, manifest.string(), c3, 3);
    CHECK(read_all() == first);

    // empty image list -> empty manifest
    Client c4;
    auto empty = build_dataset({}, cap_ep, ext_ep, shot, manifest.string(), c4);
    CHECK(empty.empty());
    CHECK(read_all().empty());

    for (auto& p : images) std::filesystem::remove(p);
    std::filesystem::remove(manifest);
}

TEST_CASE("bearer key presence is recorded in the log") {
    FixtureFile fx("sesa_sem_key.json");
    ModelEndpoint ep = mock_endpoint(fx, EndpointRole::Captioner);
    auto msgs = build_caption_messages("k");
    fx.add(request_body(ep, msgs), "ok");

    setenv("SESA_ENDPOINT_KEY", "secret", 1);
    Client with_key;
    with_key.chat(ep, msgs);
    CHECK(with_key.log.at(0).authorized);
    unsetenv("SESA_ENDPOINT_KEY");
    Client without;
    without.chat(ep, msgs);
    CHECK_FALSE(without.log.at(0).authorized);
}
