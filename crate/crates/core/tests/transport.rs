//! Distributed execution over channels and UDP.

use std::collections::BTreeMap;
use std::net::UdpSocket;
use std::time::Duration;

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nlos_bp::experiments::{trial_seed, DEFAULT_SEED};
use nlos_bp::transport::{
    encode_belief_frame, run_agents, BeliefLink, Missing, RetryPolicy, SensorAgent, TransportError, TransportKind,
    UdpLink,
};
use nlos_bp::{
    run_sync_rounds, BpConfig, GaussianBelief, NetworkConstraints, NoiseModel, ScatterFamily, ScenarioConfig,
};

fn noisy_preset(max_iters: usize) -> (NetworkConstraints, BpConfig) {
    let cfg = ScenarioConfig::paper_preset(ScatterFamily::Biorthogonal, NoiseModel::reference(), DEFAULT_SEED);
    let scenario = cfg.build().unwrap();
    let bp = BpConfig {
        max_iters,
        tol: f64::MIN_POSITIVE,
        ..cfg.bp_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(DEFAULT_SEED, 3));
    (scenario.noisy_constraints(&bp.geometry, &mut rng).unwrap(), bp)
}

#[test]
fn transports_match_the_synchronous_engine() {
    let (net, bp) = noisy_preset(20);
    let sync = run_sync_rounds(&net, &bp).unwrap();
    let inproc = run_agents(&net, &bp, &TransportKind::InProcess).unwrap();
    let udp = run_agents(&net, &bp, &TransportKind::UdpLoopback(RetryPolicy::default())).unwrap();
    assert_eq!(inproc.history.len(), 21);
    assert_eq!(inproc.history, udp.history);
    // the engine may stop early once the means stop moving entirely
    for (l, beliefs) in sync.history.iter().enumerate() {
        assert_eq!(beliefs, &inproc.history[l], "iteration {l}");
    }
}

#[test]
fn anchor_frames_are_identical_every_round() {
    let (net, bp) = noisy_preset(8);
    let run = run_agents(&net, &bp, &TransportKind::InProcess).unwrap();
    let frames: Vec<_> = run
        .history
        .iter()
        .map(|b| encode_belief_frame(0, 0, &b[0]).unwrap())
        .collect();
    assert!(frames.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn agents_ignore_non_neighbors() {
    let (net, bp) = noisy_preset(1);
    let alpha = bp.resolve_alpha(&net).unwrap();
    // node 3 neighbors nodes 1 and 4 only
    let mut agent = SensorAgent::new(&net, 3, bp.sigma2, alpha).unwrap();
    assert_eq!(agent.neighbors(), vec![1, 4]);
    let belief = |x: f64| GaussianBelief::new(Vector2::new(x, -x), Matrix2::identity() * 2.0);
    let honest: BTreeMap<_, _> = [(1, belief(1.0)), (4, belief(2.0))].into();
    let mut noisy = honest.clone();
    noisy.insert(0, belief(1e6));
    noisy.insert(2, belief(-1e6));
    let a = agent.clone().step(&honest).unwrap();
    let b = agent.step(&noisy).unwrap();
    assert_eq!(a, b);
}

#[test]
fn silent_neighbor_times_out() {
    let silent = UdpSocket::bind("127.0.0.1:0").unwrap();
    let socket = UdpSocket::bind("127.0.0.1:0").unwrap();
    let policy = RetryPolicy {
        retries: 2,
        interval: Duration::from_millis(20),
    };
    let peers = [(7, silent.local_addr().unwrap())].into();
    let mut link = UdpLink::new(3, socket, peers, policy).unwrap();
    let own = GaussianBelief::new(Vector2::zeros(), Matrix2::identity());
    match link.exchange(4, &own) {
        Err(TransportError::RoundTimeout {
            node,
            neighbor,
            iteration,
            missing,
        }) => {
            assert_eq!((node, neighbor, iteration, missing), (3, 7, 4, Missing::Frame));
        }
        other => panic!("expected a timeout, got {other:?}"),
    }
    // the silent peer saw the initial send plus every retry
    silent.set_nonblocking(true).unwrap();
    let mut buf = [0u8; 64];
    let mut count = 0;
    while silent.recv_from(&mut buf).is_ok() {
        count += 1;
    }
    assert_eq!(count, 3);
}
