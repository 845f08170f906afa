use std::path::PathBuf;

use sprayopt::api::CreateCampaign;
use sprayopt::campaign::{write_results_csv, CampaignConfig, Phase, ResultRow, RowStatus};
use sprayopt::gp::FitConfig;
use sprayopt::optimizer::ModelConfig;
use sprayopt_client::{Client, Results};
use sprayopt_service::{campaign_path, serve, ServiceConfig};

fn quick_config() -> CampaignConfig {
    CampaignConfig {
        candidate_count: 1500,
        model: ModelConfig {
            fit: FitConfig {
                restarts: 2,
                max_iterations: 80,
                ..FitConfig::default()
            },
            ..ModelConfig::default()
        },
        seed: 3,
        ..CampaignConfig::default()
    }
}

async fn start(dir: PathBuf) -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let config = ServiceConfig {
        data_dir: dir,
        defaults: quick_config(),
    };
    tokio::spawn(serve(listener, config));
    Client::new(format!("http://{addr}"))
}

async fn create(client: &Client, id: &str) {
    let req = CreateCampaign {
        id: Some(id.into()),
        ..CreateCampaign::default()
    };
    let created = client.create(&req).await.unwrap();
    assert_eq!(created.data.id, id);
    assert_eq!(created.revision, 0);
}

/// Ignites at the first evaluated setting with a +2 V reading; returns the revision.
async fn ignite(client: &Client, id: &str) -> u64 {
    let view = client.get(id).await.unwrap();
    let first = &view.data.state.history[0];
    let v = first.measurements.voltage + 2.0;
    client
        .ignite(id, first.x.controllable, v, None)
        .await
        .unwrap()
        .revision
}

fn row(batch: u64, i: usize, hv: f64, por: f64) -> ResultRow {
    ResultRow {
        batch_id: batch,
        candidate_index: i,
        microhardness_HV: Some(hv),
        porosity_pct: Some(por),
        application_rate: None,
        deposition_efficiency_pct: None,
        measured_voltage_V: Some(63.0),
        dropped_flag: false,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn happy_path_drives_the_phase_machine() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path().to_path_buf()).await;
    create(&client, "c1").await;

    let mut revisions = vec![0];
    let view = client.get("c1").await.unwrap();
    assert_eq!(view.data.state.phase, Phase::NeedsIgnition);
    assert_eq!(view.data.state.history.len(), 86);
    assert!(view.data.incumbent.point.is_none());

    let first = view.data.state.history[0].clone();
    let started = client
        .ignite(
            "c1",
            first.x.controllable,
            first.measurements.voltage + 2.0,
            Some(0),
        )
        .await
        .unwrap();
    revisions.push(started.revision);
    assert!(started.data.delta_b.is_finite());
    assert_eq!(
        client.get("c1").await.unwrap().data.state.phase,
        Phase::ReadyToPropose
    );

    let batch = client.propose("c1", Some(started.revision)).await.unwrap();
    revisions.push(batch.revision);
    assert_eq!(batch.data.proposal.candidates.len(), 5);
    assert_eq!(
        client.get("c1").await.unwrap().data.state.phase,
        Phase::AwaitingResults
    );

    let rows: Vec<ResultRow> = (0..5)
        .map(|i| row(batch.data.batch_id, i, 600.0, 10.0))
        .collect();
    let report = client
        .ingest("c1", &Results::Rows(rows), Some(batch.revision))
        .await
        .unwrap();
    revisions.push(report.revision);
    assert!(report.data.batch_complete);
    assert!(report
        .data
        .rows
        .iter()
        .all(|r| r.status == RowStatus::Accepted));
    assert_eq!(report.data.phase, Phase::ReadyToPropose);

    let view = client.get("c1").await.unwrap();
    assert_eq!(view.data.state.phase, Phase::ReadyToPropose);
    assert_eq!(view.data.state.history.len(), 91);
    assert_eq!(view.revision, report.revision);
    assert!(revisions.windows(2).all(|w| w[0] < w[1]));

    let done = client.finish("c1", None).await.unwrap();
    assert!(done.revision > view.revision);
    assert_eq!(
        client.get("c1").await.unwrap().data.state.phase,
        Phase::Terminated
    );
    assert_eq!(client.list().await.unwrap(), vec!["c1".to_string()]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn whatif_and_get_leave_the_campaign_file_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path().to_path_buf()).await;
    create(&client, "w").await;
    ignite(&client, "w").await;
    let batch = client.propose("w", None).await.unwrap();
    let path = campaign_path(dir.path(), "w");
    let before_bytes = std::fs::read(&path).unwrap();
    let before = client.get("w").await.unwrap();

    let rows: Vec<ResultRow> = (0..5)
        .map(|i| row(batch.data.batch_id, i, 655.0, 7.0))
        .collect();
    let outcome = client.what_if("w", &Results::Rows(rows)).await.unwrap();
    assert!(outcome.data.incumbent.cost <= before.data.incumbent.cost);
    assert!(outcome.data.incumbent.point.is_some());
    assert!(outcome.data.preview.is_some());
    assert_eq!(outcome.revision, before.revision);

    let after = client.get("w").await.unwrap();
    assert_eq!(after.revision, before.revision);
    assert_eq!(after.data.state, before.data.state);
    assert_eq!(std::fs::read(&path).unwrap(), before_bytes);
    assert!(client.server_config().await.is_ok());
    assert_eq!(std::fs::read(&path).unwrap(), before_bytes);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_ingests_with_one_revision_admit_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path().to_path_buf()).await;
    create(&client, "race").await;
    ignite(&client, "race").await;
    let batch = client.propose("race", None).await.unwrap();
    let rows: Vec<ResultRow> = (0..5)
        .map(|i| row(batch.data.batch_id, i, 600.0, 10.0))
        .collect();
    let results = Results::Rows(rows);

    let (a, b) = tokio::join!(
        client.ingest("race", &results, Some(batch.revision)),
        client.ingest("race", &results, Some(batch.revision)),
    );
    let oks = [&a, &b].iter().filter(|r| r.is_ok()).count();
    assert_eq!(oks, 1);
    let err = a.err().or(b.err()).unwrap();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(409));
    assert_eq!(err.category(), "stale-revision");
    assert_eq!(
        client.get("race").await.unwrap().data.state.history.len(),
        91
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path().to_path_buf()).await;

    let missing = client.get("nope").await.unwrap_err();
    assert_eq!(missing.status().unwrap().as_u16(), 404);
    assert_eq!(missing.category(), "not-found");
    assert_eq!(
        client
            .get("..%2Fetc")
            .await
            .unwrap_err()
            .status()
            .unwrap()
            .as_u16(),
        404
    );

    create(&client, "e").await;
    let dup = client
        .create(&CreateCampaign {
            id: Some("e".into()),
            ..CreateCampaign::default()
        })
        .await
        .unwrap_err();
    assert_eq!(dup.status().unwrap().as_u16(), 409);

    let early = client.propose("e", None).await.unwrap_err();
    assert_eq!(early.status().unwrap().as_u16(), 409);
    assert_eq!(early.category(), "phase-violation");

    let mut off_history = client.get("e").await.unwrap().data.state.history[0]
        .x
        .controllable;
    off_history.gun_current += 1.234;
    let bad = client
        .ignite("e", off_history, 60.0, None)
        .await
        .unwrap_err();
    assert_eq!(bad.status().unwrap().as_u16(), 422);
    assert_eq!(bad.category(), "invalid-argument");

    let rev = ignite(&client, "e").await;
    let stale = client.propose("e", Some(rev - 1)).await.unwrap_err();
    assert_eq!(stale.status().unwrap().as_u16(), 409);
    assert_eq!(stale.category(), "stale-revision");
    let batch = client.propose("e", Some(rev)).await.unwrap();

    let csv = format!(
        "batch_id,candidate_index,microhardness_HV,porosity_pct,measured_voltage_V\n{b},0,600,10,63\n{b},1,six hundred,10,63\n{b},9,600,10,63\n",
        b = batch.data.batch_id
    );
    let rejected = client
        .ingest("e", &Results::Csv(csv), None)
        .await
        .unwrap_err();
    assert_eq!(rejected.status().unwrap().as_u16(), 422);
    let report = rejected.report().expect("row detail");
    let statuses: Vec<(usize, RowStatus)> =
        report.rows.iter().map(|r| (r.line, r.status)).collect();
    assert_eq!(
        statuses,
        vec![
            (2, RowStatus::Accepted),
            (3, RowStatus::Rejected),
            (4, RowStatus::Rejected)
        ]
    );
    assert!(report.rows[1]
        .message
        .as_deref()
        .unwrap()
        .contains("microhardness_HV"));

    let garbage = client
        .what_if("e", &Results::Csv("not,a\nheader,row\n".into()))
        .await
        .unwrap_err();
    assert_eq!(garbage.status().unwrap().as_u16(), 422);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn drop_then_csv_ingest_and_reload_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path().to_path_buf()).await;
    create(&client, "d").await;
    ignite(&client, "d").await;
    let batch = client.propose("d", None).await.unwrap();
    let dropped = client
        .drop_candidate("d", 2, Some(batch.revision))
        .await
        .unwrap();
    assert_eq!(dropped.data.phase, Phase::AwaitingResults);
    assert!(client.drop_candidate("d", 7, None).await.is_err());

    let rows: Vec<ResultRow> = [0, 1, 3, 4]
        .iter()
        .map(|&i| row(batch.data.batch_id, i, 650.0, 7.5))
        .collect();
    let mut out = Vec::new();
    write_results_csv(&rows, &mut out).unwrap();
    let report = client
        .ingest("d", &Results::Csv(String::from_utf8(out).unwrap()), None)
        .await
        .unwrap();
    assert!(report.data.batch_complete);
    let view = client.get("d").await.unwrap();
    assert_eq!(view.data.state.history.len(), 90);
    assert!(view.data.incumbent.point.is_some());

    // A second server on the same directory sees the same campaign.
    let other = start(dir.path().to_path_buf()).await;
    let reloaded = other.get("d").await.unwrap();
    assert_eq!(reloaded.revision, view.revision);
    assert_eq!(reloaded.data.state, view.data.state);

    let reopened = other.new_session("d", None).await.unwrap();
    assert_eq!(reopened.data.phase, Phase::NeedsIgnition);
}
