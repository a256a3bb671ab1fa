use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lcd_engine::conformance::run_conformance;
use lcd_engine::protocol::{Connection, ProtocolError, RemoteScorer};
use lcd_engine::simworld::{lvlm_sim_scorer, make_world, prior_scorer, SceneInstance, WorldSpec};
use lcd_engine::{
    generate, Capabilities, DecodingConfig, LogitVector, Method, ScoreContext, Scorer, ScorerError,
    Vocabulary,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIMEOUT: Duration = Duration::from_secs(10);
const LCD: &str = env!("CARGO_BIN_EXE_lcd");

fn world() -> Arc<WorldSpec> {
    Arc::new(make_world(11, 6, 4, 0.9).unwrap())
}

fn expert(world: &Arc<WorldSpec>) -> Arc<dyn Scorer> {
    let scene = SceneInstance::new(world, [0, 2]).unwrap();
    Arc::new(lvlm_sim_scorer(world.clone(), scene, 0.5).unwrap())
}

#[test]
fn loopback_backend_passes_conformance() {
    let w = world();
    let scorers = [
        expert(&w),
        Arc::new(prior_scorer(w.clone())) as Arc<dyn Scorer>,
    ];
    for scorer in scorers {
        let connect = || Connection::loopback(scorer.clone(), TIMEOUT);
        for r in run_conformance(&connect, None) {
            assert!(r.passed, "{r}");
        }
    }
}

#[test]
fn stdio_backend_passes_conformance() {
    let connect = || {
        Connection::spawn(
            Command::new(LCD).args(["serve-sim", "--present", "dog,cat"]),
            TIMEOUT,
        )
    };
    let results = run_conformance(&connect, None);
    assert_eq!(results.len(), 8);
    for r in results {
        assert!(r.passed, "{r}");
    }
}

#[test]
fn random_prefixes_bit_identical_over_loopback() {
    let w = world();
    let local = expert(&w);
    let remote = RemoteScorer::loopback_with_timeout(local.clone(), TIMEOUT).unwrap();
    let v = w.vocabulary().size() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let prompt: Vec<usize> = (0..rng.next_u64() % 3)
            .map(|_| (rng.next_u64() % v) as usize)
            .collect();
        let generated: Vec<usize> = (0..rng.next_u64() % 12)
            .map(|_| (rng.next_u64() % v) as usize)
            .collect();
        let session = format!("s{i}");
        let ctx = ScoreContext {
            session_id: &session,
            prompt: &prompt,
            generated: &generated,
            include_grounding: i % 2 == 0,
        };
        let a = local.score(&ctx).unwrap();
        let b = remote.score(&ctx).unwrap();
        let bits = |l: &LogitVector| {
            l.to_values()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b), "prefix {i}");
    }
}

/// Records every `include_grounding` flag it is asked with.
struct Probe {
    vocab: Vocabulary,
    seen: Mutex<Vec<bool>>,
}

impl Scorer for Probe {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError> {
        self.seen.lock().unwrap().push(ctx.include_grounding);
        Ok(LogitVector::from_values(&[-1.0, 0.5, 0.0]).unwrap())
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            grounding: true,
        }
    }
}

fn probe() -> Arc<Probe> {
    Arc::new(Probe {
        vocab: Vocabulary::new(vec!["</s>".into(), "a".into(), "b".into()], 0).unwrap(),
        seen: Mutex::new(Vec::new()),
    })
}

#[test]
fn prior_queries_never_carry_grounding() {
    let exp = probe();
    let pri = probe();
    let e = RemoteScorer::loopback_with_timeout(exp.clone(), TIMEOUT).unwrap();
    let p = RemoteScorer::loopback_with_timeout(pri.clone(), TIMEOUT).unwrap();
    let config = DecodingConfig {
        max_new_tokens: 6,
        ..DecodingConfig::with_method(Method::Lcd)
    };
    generate(&e, Some(&p), &[1], &config).unwrap();
    let pe = exp.seen.lock().unwrap().clone();
    let pp = pri.seen.lock().unwrap().clone();
    assert!(!pe.is_empty() && pe.iter().all(|&g| g));
    assert!(!pp.is_empty() && pp.iter().all(|&g| !g));
}

#[test]
fn mismatched_vocabulary_rejected_at_handshake() {
    let w = world();
    let conn = Connection::loopback(expert(&w), TIMEOUT).unwrap();
    let other = make_world(12, 5, 4, 0.9).unwrap();
    let err = RemoteScorer::connect(conn, Some(other.vocabulary())).unwrap_err();
    assert!(matches!(err, ProtocolError::VocabularyMismatch(_)), "{err}");
    assert!(matches!(
        ScorerError::from(err),
        ScorerError::VocabularyMismatch(_)
    ));
}

/// Spawns a sim backend that sees only the first `requests` request lines;
/// it then reaches end of input, exits and closes the stream.
fn dying_backend(requests: usize, extra: &str) -> Connection {
    let reads = "read -r l; echo \"$l\"; ".repeat(requests);
    let script = format!("( {reads}) | {LCD} serve-sim {extra}");
    Connection::spawn(Command::new("sh").args(["-c", &script]), TIMEOUT).unwrap()
}

#[test]
fn backend_dying_mid_session_is_unavailable() {
    let remote = RemoteScorer::connect(dying_backend(3, "--present dog"), None).unwrap();
    let start = Instant::now();
    let ctx = |g: &'static [usize]| ScoreContext {
        session_id: "s",
        prompt: &[],
        generated: g,
        include_grounding: true,
    };
    for _ in 0..3 {
        remote.score(&ctx(&[1])).unwrap();
    }
    let err = remote.score(&ctx(&[1])).unwrap_err();
    assert!(matches!(err, ScorerError::Unavailable(_)), "{err}");
    let again = remote.score(&ctx(&[])).unwrap_err();
    assert!(matches!(again, ScorerError::Unavailable(_)));
    assert!(start.elapsed() < TIMEOUT);
}

#[test]
fn generation_fails_cleanly_when_backend_dies() {
    let w = world();
    let conn = dying_backend(1, "--seed 11 --objects 6 --fillers 4 --present dog");
    let remote = RemoteScorer::connect(conn, Some(w.vocabulary())).unwrap();
    let config = DecodingConfig {
        max_new_tokens: 3,
        ..DecodingConfig::with_method(Method::Sample)
    };
    let err = generate(&remote, None, &[], &config).unwrap_err();
    assert!(err.to_string().contains("unavailable"), "{err}");
}

#[test]
fn silent_backend_times_out() {
    let mut conn = Connection::spawn(
        Command::new("sh").args(["-c", "exec sleep 30"]),
        Duration::from_millis(200),
    )
    .unwrap();
    let start = Instant::now();
    let err = conn.recv_handshake().unwrap_err();
    assert!(matches!(err, ProtocolError::Timeout(_)), "{err}");
    assert!(start.elapsed() < Duration::from_secs(5));
}
