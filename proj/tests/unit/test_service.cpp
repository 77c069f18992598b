#include <doctest.h>

#include <chrono>
#include <thread>

#include "idinvert/archive.hpp"
#include "idinvert/errors.hpp"
#include "idinvert/image.hpp"
#include "idinvert/service.hpp"
#include "idinvert/synth_data.hpp"
#include "tiny_models.hpp"

#include <httplib.h>

using namespace idinvert;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Registry with one model "tiny" and its boundaries.
struct Fixture {
  testutil::TempDir dir{"svc"};
  fs::path registry;
  fs::path ckpts;

  Fixture() {
    registry = dir.path / "registry";
    ckpts = dir.path / "ckpts";
    testutil::TinyModels m(1);
    m.save(ckpts);
    service::register_model(registry, "tiny", ckpts / "gan.ckpt", ckpts / "encoder.ckpt", ckpts / "features.ckpt",
                            ckpts / "boundaries.json");
  }

  service::ServiceConfig config() const {
    service::ServiceConfig c;
    c.port = 0;
    c.registry_dir = registry;
    c.workers = 2;
    return c;
  }
};

std::string png_of(double size, double hue) {
  const auto img = data::render_shape({data::ShapeKind::disk, size, hue, 0.5, 0.5, 0.4}, 32);
  const auto bytes = image::encode_png(img);
  return {bytes.begin(), bytes.end()};
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

json poll_done(httplib::Client& cli, const std::string& id, std::vector<int>* steps = nullptr) {
  for (int i = 0; i < 2000; ++i) {
    auto res = cli.Get("/jobs/" + id);
    REQUIRE(res);
    REQUIRE(res->status == 200);
    auto j = json::parse(res->body);
    if (steps) steps->push_back(j.at("progress").at("step").get<int>());
    const auto state = j.at("state").get<std::string>();
    if (state == "done" || state == "failed") return j;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  FAIL("job " << id << " did not finish");
  return {};
}

std::string submit(httplib::Client& cli, const std::string& png, int steps, const std::string& model = "tiny") {
  httplib::MultipartFormDataItems items = {
      {"image", png, "x.png", "image/png"},
      {"model", model, "", ""},
      {"lambda_dom", "2", "", ""},
      {"steps", std::to_string(steps), "", ""},
  };
  auto res = cli.Post("/invert", items);
  REQUIRE(res);
  REQUIRE(res->status == 202);
  return json::parse(res->body).at("job").get<std::string>();
}

}  // namespace

TEST_CASE("empty registry lists nothing and unknown ids are not found") {
  testutil::TempDir dir("empty");
  service::Registry r(dir.path);
  CHECK(r.list().empty());
  CHECK_THROWS_AS(r.entry("nope"), NotFoundError);
}

TEST_CASE("registry entries carry validated hashes") {
  Fixture f;
  service::Registry r(f.registry);
  REQUIRE(r.list().size() == 1);
  const auto& e = r.entry("tiny");
  CHECK(e.hashes.at("generator") == archive::file_sha256(f.ckpts / "gan.ckpt"));
  CHECK(e.hashes.at("encoder") == archive::file_sha256(f.ckpts / "encoder.ckpt"));
  CHECK(e.resolution == 8);
  CHECK(e.num_layers == 4);
  CHECK(e.boundary_ids == std::vector<std::string>{"size", "pos_x"});

  // A tampered checkpoint drops the entry.
  archive::write_text(f.registry / "models" / "tiny" / "features.ckpt", "garbage");
  service::Registry tampered(f.registry);
  CHECK(tampered.list().empty());
  CHECK(tampered.problems().size() == 1);
}

TEST_CASE("registering an encoder against another generator is refused") {
  Fixture f;
  testutil::TinyModels other(9);
  other.save(f.dir.path / "other");
  CHECK_THROWS_AS(service::register_model(f.registry, "mixed", f.dir.path / "other" / "gan.ckpt",
                                          f.ckpts / "encoder.ckpt", f.ckpts / "features.ckpt"),
                  ValidationError);
}

TEST_CASE("environment configures the service") {
  setenv("IDINVERT_PORT", "9123", 1);
  setenv("IDINVERT_WORKERS", "3", 1);
  setenv("IDINVERT_REGISTRY", "/tmp/reg", 1);
  const auto c = service::config_from_env();
  CHECK(c.port == 9123);
  CHECK(c.workers == 3);
  CHECK(c.registry_dir == "/tmp/reg");
  setenv("IDINVERT_WORKERS", "zero", 1);
  CHECK_THROWS_AS(service::config_from_env(), ValidationError);
  unsetenv("IDINVERT_PORT");
  unsetenv("IDINVERT_WORKERS");
  unsetenv("IDINVERT_REGISTRY");
}

TEST_CASE("jobs are queued and results wait for completion") {
  Fixture f;
  service::Service s(f.config());  // not started: nothing runs
  const auto a = s.submit_invert(bytes_of(png_of(0.3, 1.0)), "tiny", 2.0, 5);
  const auto b = s.submit_invert(bytes_of(png_of(0.3, 1.0)), "tiny", 2.0, 5);
  CHECK(a.id != b.id);
  CHECK(s.job_json(a.id).at("state") == "queued");
  CHECK_THROWS_AS(s.result_png(a.id), service::HttpError);
  CHECK_THROWS_AS(s.job_json("missing"), NotFoundError);
  CHECK_THROWS_AS(s.submit_invert(bytes_of("not a png"), "tiny", 2.0, 5), service::HttpError);
  CHECK_THROWS_AS(s.submit_invert(bytes_of(png_of(0.3, 1.0)), "nope", 2.0, 5), NotFoundError);
  CHECK_THROWS_AS(s.submit_invert(bytes_of(png_of(0.3, 1.0)), "tiny", -1.0, 5), ValidationError);
  CHECK_THROWS_AS(s.submit_invert(bytes_of(png_of(0.3, 1.0)), "tiny", 2.0, 100000), ValidationError);
}

TEST_CASE("HTTP round trip: invert, poll, fetch, edit, interpolate") {
  Fixture f;
  service::Service s(f.config());
  const int port = s.start();
  httplib::Client cli("127.0.0.1", port);

  auto models = cli.Get("/models");
  REQUIRE(models);
  CHECK(models->status == 200);
  const auto mj = json::parse(models->body);
  REQUIRE(mj.at("models").size() == 1);
  CHECK(mj["models"][0]["id"] == "tiny");

  auto bnd = cli.Get("/models/tiny/boundaries");
  REQUIRE(bnd);
  CHECK(bnd->status == 200);
  CHECK(json::parse(bnd->body).at("boundaries").size() == 2);
  CHECK(cli.Get("/models/nope/boundaries")->status == 404);
  CHECK(cli.Get("/jobs/nope")->status == 404);

  std::vector<int> steps;
  const std::string a = submit(cli, png_of(0.3, 1.0), 15);
  const auto done = poll_done(cli, a, &steps);
  CHECK(done.at("state") == "done");
  CHECK(done.at("loss_trace").size() == 16);
  CHECK(std::is_sorted(steps.begin(), steps.end()));
  CHECK(done.at("progress").at("step") == 15);

  auto png = cli.Get("/jobs/" + a + "/result.png");
  REQUIRE(png);
  CHECK(png->status == 200);
  CHECK(png->get_header_value("Content-Type") == "image/png");
  const auto img = image::decode_png(bytes_of(png->body));
  CHECK(img.width == 8);
  CHECK(img.height == 8);

  // alpha 0 reproduces the stored reconstruction byte for byte.
  auto edit = [&](double alpha) {
    return cli.Post("/edit", json{{"job", a}, {"boundary", "size"}, {"alpha", alpha}}.dump(), "application/json");
  };
  auto e0 = edit(0.0);
  REQUIRE(e0);
  CHECK(e0->status == 200);
  CHECK(e0->body == png->body);
  auto e1 = edit(1.5), e1b = edit(1.5);
  CHECK(e1->status == 200);
  CHECK(e1->body == e1b->body);
  CHECK(edit(7.0)->status == 400);
  CHECK(cli.Post("/edit", json{{"job", a}, {"boundary", "hue"}, {"alpha", 1.0}}.dump(), "application/json")->status ==
        404);
  CHECK(cli.Post("/edit", json{{"job", a}, {"boundary", "size"}, {"alpha", 1.0}, {"layers", {0, 9}}}.dump(),
                 "application/json")
            ->status == 400);
  CHECK(cli.Post("/edit", "{not json", "application/json")->status == 400);

  // Interpolation endpoints equal the source reconstructions.
  const std::string b = submit(cli, png_of(0.2, 4.0), 0);
  CHECK(poll_done(cli, b).at("state") == "done");
  const auto b_png = cli.Get("/jobs/" + b + "/result.png")->body;
  auto interp = [&](double t) {
    return cli.Post("/interpolate", json{{"a", {{"job", a}}}, {"b", {{"job", b}}}, {"t", t}}.dump(),
                    "application/json");
  };
  CHECK(interp(0.0)->body == png->body);
  CHECK(interp(1.0)->body == b_png);
  CHECK(interp(0.5)->status == 200);
  CHECK(interp(2.0)->status == 400);

  // Raw codes work too.
  const auto code = inversion::load_result(s.jobs().result_path(a)).styles.storage();
  auto raw = cli.Post("/edit", json{{"model", "tiny"}, {"styles", code}, {"boundary", "size"}, {"alpha", 0.0}}.dump(),
                      "application/json");
  CHECK(raw->status == 200);
  CHECK(cli.Post("/edit", json{{"model", "tiny"}, {"styles", {1.0, 2.0}}, {"boundary", "size"}, {"alpha", 0.0}}.dump(),
                 "application/json")
            ->status == 400);
  s.stop();
}

TEST_CASE("bad uploads are client errors") {
  Fixture f;
  service::Service s(f.config());
  httplib::Client cli("127.0.0.1", s.start());
  httplib::MultipartFormDataItems junk = {{"image", "definitely not a png", "x.png", "image/png"},
                                          {"model", "tiny", "", ""}};
  CHECK(cli.Post("/invert", junk)->status == 400);
  httplib::MultipartFormDataItems unknown = {{"image", png_of(0.3, 1.0), "x.png", "image/png"},
                                             {"model", "ghost", "", ""}};
  CHECK(cli.Post("/invert", unknown)->status == 404);
  httplib::MultipartFormDataItems no_image = {{"model", "tiny", "", ""}};
  CHECK(cli.Post("/invert", no_image)->status == 400);
  httplib::MultipartFormDataItems bad_steps = {{"image", png_of(0.3, 1.0), "x.png", "image/png"},
                                               {"model", "tiny", "", ""},
                                               {"steps", "ten", "", ""}};
  CHECK(cli.Post("/invert", bad_steps)->status == 400);
  CHECK(cli.Post("/invert", "{}", "application/json")->status == 415);
}

TEST_CASE("diffusion jobs run through the queue") {
  Fixture f;
  service::Service s(f.config());
  httplib::Client cli("127.0.0.1", s.start());
  auto post = [&](int w) {
    httplib::MultipartFormDataItems items = {
        {"target", png_of(0.3, 1.0), "t.png", "image/png"},
        {"context", png_of(0.15, 4.0), "c.png", "image/png"},
        {"model", "tiny", "", ""},
        {"x", "2", "", ""},
        {"y", "2", "", ""},
        {"width", std::to_string(w), "", ""},
        {"height", "4", "", ""},
        {"steps", "5", "", ""},
    };
    return cli.Post("/diffuse", items);
  };
  CHECK(post(0)->status == 400);
  auto ok = post(4);
  REQUIRE(ok->status == 202);
  const auto id = json::parse(ok->body).at("job").get<std::string>();
  const auto done = poll_done(cli, id);
  CHECK(done.at("state") == "done");
  CHECK(done.at("kind") == "diffuse");
  CHECK(image::decode_png(bytes_of(cli.Get("/jobs/" + id + "/result.png")->body)).width == 8);
}

TEST_CASE("jobs interrupted by a restart run again") {
  Fixture f;
  std::string queued, running;
  {
    service::Service s(f.config());
    queued = s.submit_invert(bytes_of(png_of(0.3, 1.0)), "tiny", 2.0, 3).id;
    running = s.submit_invert(bytes_of(png_of(0.25, 2.0)), "tiny", 2.0, 3).id;
    auto r = *s.jobs().get(running);
    r.state = service::JobState::running;
    r.step = 2;
    s.jobs().update(r);
  }  // "crash": nothing ever started
  service::JobStore store(f.registry);
  CHECK(store.get(running)->state == service::JobState::running);

  service::Service s(f.config());
  httplib::Client cli("127.0.0.1", s.start());
  CHECK(poll_done(cli, queued).at("state") == "done");
  CHECK(poll_done(cli, running).at("state") == "done");
}

TEST_CASE("concurrent renders agree") {
  Fixture f;
  service::Service s(f.config());
  httplib::Client cli("127.0.0.1", s.start());
  const std::string a = submit(cli, png_of(0.3, 1.0), 2);
  REQUIRE(poll_done(cli, a).at("state") == "done");
  const json req = {{"job", a}, {"boundary", "pos_x"}, {"alpha", -1.0}};
  const auto expect = s.render_edit(req);
  std::vector<std::thread> ts;
  std::vector<int> same(4, 0);
  for (int i = 0; i < 4; ++i) {
    ts.emplace_back([&, i] {
      for (int k = 0; k < 5; ++k) same[static_cast<std::size_t>(i)] += s.render_edit(req) == expect ? 1 : 0;
    });
  }
  for (auto& t : ts) t.join();
  for (int v : same) CHECK(v == 5);
}
