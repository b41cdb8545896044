use std::path::Path;
use std::time::{Duration, Instant};

use forge_core::clean::list_pending;
use forge_core::pipeline::PipelineConfig;
use forge_core::service::{router, spawn, AppState, ServerHandle, SCHEMAS};
use forge_core::DatasetStore;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn schema(name: &str) -> jsonschema::Validator {
    let text = SCHEMAS.iter().find(|(n, _)| *n == name).unwrap().1;
    jsonschema::validator_for(&serde_json::from_str(text).unwrap()).unwrap()
}

fn assert_valid(name: &str, v: &Value) {
    let errors: Vec<String> = schema(name).iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{v:#}");
}

struct Api {
    server: ServerHandle,
    client: Client,
}

impl Api {
    fn start(root: &Path, overrides: &[(&str, &str)]) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.apply([
            ("output.root", root.to_str().unwrap()),
            ("sampler.scene_px", "64"),
            ("extract.patch", "32"),
            ("download.months", "2"),
            ("download.backoff_ms", "1"),
        ])
        .unwrap();
        cfg.apply(overrides.iter().copied()).unwrap();
        let server = spawn(router(AppState::new(cfg)), "127.0.0.1:0").unwrap();
        Self { server, client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api{path}", self.server.url())
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(self.url(path)).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn get_bytes(&self, path: &str) -> (StatusCode, Vec<u8>) {
        let r = self.client.get(self.url(path)).send().unwrap();
        (r.status(), r.bytes().unwrap().to_vec())
    }

    fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn put(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.put(self.url(path)).json(&body).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn run(&self, stage: &str, overrides: Value) -> Value {
        let (status, created) = self.post("/jobs", json!({ "stage": stage, "overrides": overrides }));
        assert_eq!(status, StatusCode::OK, "{created}");
        assert_valid("job_created.json", &created);
        self.wait(created["job_id"].as_u64().unwrap())
    }

    fn wait(&self, id: u64) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let (status, job) = self.get(&format!("/jobs/{id}"));
            assert_eq!(status, StatusCode::OK);
            assert_valid("job.json", &job);
            if job["state"] == "Done" || job["state"] == "Failed" {
                return job;
            }
            assert!(Instant::now() < deadline, "job {id} did not finish");
            std::thread::sleep(Duration::from_millis(25));
        }
    }
}

#[test]
fn points_geojson_after_generate() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(dir.path(), &[]);
    let (_, empty) = api.get("/points.geojson");
    assert_eq!(empty["features"].as_array().unwrap().len(), 0);

    let job = api.run("generate", json!({ "sampler.n_points": 5, "sampler.seed": 4 }));
    assert_eq!(job["state"], "Done");
    assert_eq!(job["progress"]["generate"]["status"], "Done");
    let (status, doc) = api.get("/points.geojson");
    assert_eq!(status, StatusCode::OK);
    assert_valid("points.geojson.json", &doc);
    assert_eq!(doc["features"].as_array().unwrap().len(), 5);

    let (_, scenes) = api.get("/scenes");
    assert_valid("scenes.json", &scenes);
    assert_eq!(scenes.as_array().unwrap().len(), 5);
}

#[test]
fn jobs_queue_in_submission_order() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(dir.path(), &[]);
    let (_, first) = api.post("/jobs", json!({ "stage": "all" }));
    let (_, second) = api.post("/jobs", json!({ "stage": "all" }));
    let second_id = second["job_id"].as_u64().unwrap();
    let (_, queued) = api.get(&format!("/jobs/{second_id}"));
    assert_eq!(queued["state"], "Queued");
    let first = api.wait(first["job_id"].as_u64().unwrap());
    assert_eq!(first["state"], "Done", "{first}");
    for stage in ["generate", "download", "convert", "clean", "extract"] {
        assert_eq!(first["progress"][stage]["status"], "Done", "{stage}");
    }
    assert_eq!(first["progress"]["download"]["done"], 72 / 12 * 2);
    let second = api.wait(second_id);
    assert_eq!(second["state"], "Done");
    assert!(second["log"].as_array().unwrap().iter().any(|l| l.as_str().unwrap().contains("already done")));

    let (status, scene) = api.get("/scenes/0");
    assert_eq!(status, StatusCode::OK);
    assert_valid("scene.json", &scene);
    let (status, png) = api.get_bytes("/scenes/0/preview.png?satellite=s1");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    assert_eq!(api.get("/scenes/9").0, StatusCode::NOT_FOUND);
    assert_eq!(api.get("/jobs/999").0, StatusCode::NOT_FOUND);
}

#[test]
fn failing_job_names_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(dir.path(), &[]);
    let job = api.run("convert", json!({}));
    assert_eq!(job["state"], "Failed");
    assert_eq!(job["failed_stage"], "convert");
    assert!(job["error"].as_str().unwrap().contains("download"));

    let (status, err) = api.post("/jobs", json!({ "stage": "all", "overrides": { "sampler.lat_min": 60, "sampler.lat_max": 10 } }));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_valid("error.json", &err);
    assert_eq!(api.post("/jobs", json!({ "stage": "everything" })).0.as_u16() / 100, 4);
}

#[test]
fn config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(dir.path(), &[]);
    let (status, cfg) = api.get("/config");
    assert_eq!(status, StatusCode::OK);
    assert_valid("config.json", &cfg);
    assert_eq!(cfg["clean.cloud_max"], "0.3");

    let (status, cfg) = api.put("/config", json!({ "clean.cloud_max": 0.2, "clean.manual": true }));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cfg["clean.cloud_max"], "0.2");
    assert_eq!(cfg["clean.manual"], "true");
    assert_eq!(api.get("/config").1, cfg);

    let (status, err) = api.put("/config", json!({ "clean.cloudiness": 0.2 }));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().contains("clean.cloudiness"));
    let (status, _) = api.put("/config", json!({ "sampler.lat_min": 80, "sampler.lat_max": 0 }));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(api.get("/config").1, cfg, "rejected updates must not apply");
}

#[test]
fn manual_review_flow() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(dir.path(), &[("clean.manual", "true")]);
    for stage in ["generate", "download", "convert", "clean"] {
        assert_eq!(api.run(stage, json!({}))["state"], "Done");
    }
    let (status, pending) = api.get("/review/pending");
    assert_eq!(status, StatusCode::OK);
    assert_valid("review_pending.json", &pending);
    let store = DatasetStore::open(dir.path()).unwrap();
    let expected = serde_json::to_value(list_pending(&store.load().unwrap())).unwrap();
    assert_eq!(pending, expected);
    let items = pending.as_array().unwrap().clone();
    assert_eq!(items.len(), 2 * 2 * 3);

    for item in &items {
        let id = item["id"].as_str().unwrap();
        let decision = if item["rank"] == 0 { "Keep" } else { "Discard" };
        let (status, resolved) = api.post(&format!("/review/{id}"), json!({ "decision": decision }));
        assert_eq!(status, StatusCode::OK, "{resolved}");
        assert_valid("review_item.json", &resolved);
        assert_eq!(resolved["decided_by"], "Human");
    }
    let (_, left) = api.get("/review/pending");
    assert_eq!(left.as_array().unwrap().len(), 0);

    let first = items[0]["id"].as_str().unwrap();
    assert_eq!(api.post(&format!("/review/{first}"), json!({ "decision": "Keep" })).0, StatusCode::CONFLICT);
    assert_eq!(api.post("/review/0042-s2-2020-01-0", json!({ "decision": "Keep" })).0, StatusCode::NOT_FOUND);
    assert_eq!(api.post("/review/garbage", json!({ "decision": "Keep" })).0, StatusCode::NOT_FOUND);
    assert_eq!(api.post(&format!("/review/{first}"), json!({ "decision": "Maybe" })).0.as_u16() / 100, 4);

    let (_, scenes) = api.get("/scenes");
    assert_eq!(scenes[0]["selected"], 4);
    assert_eq!(api.run("extract", json!({}))["state"], "Done");

    api.put("/config", json!({ "clean.manual": false }));
    assert_eq!(api.post(&format!("/review/{first}"), json!({ "decision": "Keep" })).0, StatusCode::FORBIDDEN);
}

#[test]
fn file_browsing_is_read_only_and_confined() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    std::fs::write(dir.path().join("secret.txt"), "no").unwrap();
    let api = Api::start(&root, &[]);
    api.run("generate", json!({}));
    let (status, listing) = api.get("/files/");
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = listing.as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["manifest.json", "points.csv"]);
    let (status, csv) = api.get_bytes("/files/points.csv");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(csv, std::fs::read(root.join("points.csv")).unwrap());
    for bad in ["/files/../secret.txt", "/files/%2E%2E/secret.txt", "/files//etc/passwd"] {
        let (status, _) = api.get_bytes(bad);
        assert!(status == StatusCode::BAD_REQUEST || status == StatusCode::NOT_FOUND, "{bad}: {status}");
    }
    assert_eq!(api.get("/files/nope.png").0, StatusCode::NOT_FOUND);
    assert_eq!(api.client.delete(api.url("/files/points.csv")).send().unwrap().status(), StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(api.get("/unknown").0, StatusCode::NOT_FOUND);
}

#[test]
fn static_ui_is_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>forge</html>").unwrap();
    std::fs::write(ui.join("app.js"), "console.log(1)").unwrap();
    let api = Api::start(&dir.path().join("data"), &[("service.static_dir", ui.to_str().unwrap())]);
    let base = api.server.url();
    let page = api.client.get(format!("{base}/")).send().unwrap().text().unwrap();
    assert_eq!(page, "<html>forge</html>");
    assert_eq!(api.client.get(format!("{base}/app.js")).send().unwrap().text().unwrap(), "console.log(1)");
    assert_eq!(api.client.get(format!("{base}/review")).send().unwrap().text().unwrap(), "<html>forge</html>");
    assert_eq!(api.get("/config").0, StatusCode::OK);
}
