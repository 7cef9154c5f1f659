use std::collections::HashMap;

use refocus::filterpipe::score_and_filter;
use refocus::policy::PolicyParams;
use refocus::rewardsvc::{ClientConfig, MockBehavior, MockConfig, MockServer, RemoteOracle};
use refocus::synthenv::{gen_dataset, EnvConfig, Episode, OracleConfig, SyntheticOracle};
use refocus::trainer::{train, MemorySink, TrainConfig};

fn env() -> EnvConfig {
    EnvConfig {
        t: 24,
        d_in: 6,
        d_q: 3,
        n_needle: 2,
        ..EnvConfig::default()
    }
}

fn oracle_config() -> OracleConfig {
    OracleConfig {
        noise_std: 0.2,
        ..OracleConfig::default()
    }
}

fn serve(episodes: &[Episode], fail_first: usize) -> MockServer {
    let map: HashMap<String, Episode> = episodes.iter().map(|e| (e.id.clone(), e.clone())).collect();
    let mut cfg = MockConfig::new(MockBehavior::Oracle {
        episodes: map,
        config: oracle_config(),
    });
    cfg.fail_first = fail_first;
    MockServer::start(cfg).unwrap()
}

fn client(server: &MockServer) -> RemoteOracle {
    RemoteOracle::new(ClientConfig {
        endpoint: server.url(),
        backoff_ms: 1,
        retries: 4,
        ..ClientConfig::default()
    })
    .unwrap()
}

#[test]
fn training_through_the_service_matches_in_process_training() {
    let data = gen_dataset(&env(), 12, 3).unwrap();
    let cfg = TrainConfig {
        n: 4,
        t_prime: 4,
        batch_size: 3,
        total_steps: 5,
        lr_heads: 1e-2,
        lr_backbone: 1e-2,
        seed: 9,
        dims: refocus::policy::PolicyDims {
            d_in: 6,
            d_q: 3,
            d_e: 5,
            d_model: 4,
            d_g: 5,
        },
        ..TrainConfig::default()
    };
    let init = PolicyParams::init(cfg.dims, 2).unwrap();

    let local = SyntheticOracle::new(oracle_config()).unwrap();
    let mut local_sink = MemorySink::default();
    let local_params = train(&cfg, init.clone(), &data, &local, &mut local_sink, None).unwrap();

    let server = serve(&data, 3);
    let remote = client(&server);
    let mut remote_sink = MemorySink::default();
    let remote_params = train(&cfg, init, &data, &remote, &mut remote_sink, None).unwrap();

    assert_eq!(local_sink.steps, remote_sink.steps);
    assert_eq!(local_params, remote_params);
    assert!(server.requests() >= 5 * 3 * 4);
}

#[test]
fn filtering_through_the_service_matches_in_process_filtering() {
    let data = gen_dataset(&env(), 10, 5).unwrap();
    let local = SyntheticOracle::new(oracle_config()).unwrap();
    let (kept_local, report_local) = score_and_filter(&data, &local, 0.01, 32).unwrap();

    let server = serve(&data, 0);
    let remote = client(&server);
    let (kept_remote, report_remote) = score_and_filter(&data, &remote, 0.01, 32).unwrap();

    assert_eq!(kept_local, kept_remote);
    assert_eq!(report_local, report_remote);
    assert_eq!(server.requests(), 10 * 16);
}

#[test]
fn unknown_episode_is_a_scoring_error() {
    let data = gen_dataset(&env(), 2, 7).unwrap();
    let server = serve(&data[..1], 0);
    let remote = client(&server);
    assert!(score_and_filter(&data, &remote, 0.0, 32).is_err());
}
