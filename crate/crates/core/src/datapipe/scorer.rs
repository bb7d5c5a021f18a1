//! Edit-quality scoring: a deterministic built-in heuristic or an external
//! process speaking newline-delimited JSON.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::pairs::EditSample;
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A pixel counts as edited when some channel moves by more than this.
const CHANGE_LEVEL: u8 = 8;
/// Fraction of changed mask pixels that earns full instruction-following credit.
const FOLLOW_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub sc_follow: f64,
    pub sc_overedit: f64,
    pub pq: f64,
    pub sc: f64,
    pub overall: f64,
}

impl QualityScores {
    pub fn from_parts(sc_follow: f64, sc_overedit: f64, pq: f64) -> Self {
        let sc = sc_follow.min(sc_overedit);
        QualityScores {
            sc_follow,
            sc_overedit,
            pq,
            sc,
            overall: (sc * pq).sqrt(),
        }
    }
}

/// Heuristic scores computed directly from the sample's pixels.
pub fn mock_scores(sample: &EditSample) -> QualityScores {
    let (src, tgt, mask) = (&sample.source, &sample.target, &sample.mask);
    let (mut inside, mut changed, mut outside, mut sq) = (0usize, 0usize, 0usize, 0.0f64);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let (a, b) = (src.pixel(x, y), tgt.pixel(x, y));
            if mask.get(x, y) {
                inside += 1;
                if a.iter().zip(&b).any(|(p, q)| p.abs_diff(*q) > CHANGE_LEVEL) {
                    changed += 1;
                }
            } else {
                outside += 1;
                for c in 0..3 {
                    let d = (f64::from(a[c]) - f64::from(b[c])) / 255.0;
                    sq += d * d;
                }
            }
        }
    }
    let follow = if inside == 0 {
        0.0
    } else {
        (changed as f64 / inside as f64 / FOLLOW_FRACTION).min(1.0) * 10.0
    };
    let mse = if outside == 0 { 0.0 } else { sq / (3 * outside) as f64 };
    QualityScores::from_parts(follow, (10.0 * (1.0 - mse)).clamp(0.0, 10.0), 10.0)
}

#[derive(Serialize)]
struct Request<'a> {
    src_path: &'a str,
    tgt_path: &'a str,
    instruction: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    sc_follow: f64,
    sc_overedit: f64,
    pq: f64,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Scorer(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker { child, stdin, lines })
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A long-lived scorer process. A worker that times out or replies with
/// garbage is killed and restarted on the next request.
pub struct ExternalScorer {
    command: String,
    timeout: Duration,
    worker: Option<Worker>,
}

impl ExternalScorer {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        ExternalScorer {
            command: command.into(),
            timeout,
            worker: None,
        }
    }

    fn exchange(&mut self, line: &str) -> Result<QualityScores> {
        if self.worker.is_none() {
            self.worker = Some(Worker::spawn(&self.command)?);
        }
        let worker = self.worker.as_mut().expect("worker just spawned");
        writeln!(worker.stdin, "{line}")
            .and_then(|_| worker.stdin.flush())
            .map_err(|e| Error::Scorer(format!("write failed: {e}")))?;
        let reply = match worker.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(Error::Scorer(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Scorer(format!("no reply within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Scorer("scorer exited".to_string()))
            }
        };
        let parsed: Reply = serde_json::from_str(&reply)
            .map_err(|e| Error::Scorer(format!("garbled reply {reply:?}: {e}")))?;
        for v in [parsed.sc_follow, parsed.sc_overedit, parsed.pq] {
            if !(0.0..=10.0).contains(&v) {
                return Err(Error::Scorer(format!("score {v} outside [0, 10]")));
            }
        }
        Ok(QualityScores::from_parts(parsed.sc_follow, parsed.sc_overedit, parsed.pq))
    }

    pub fn score(&mut self, src_path: &Path, tgt_path: &Path, instruction: &str) -> Result<QualityScores> {
        let line = serde_json::to_string(&Request {
            src_path: &src_path.to_string_lossy(),
            tgt_path: &tgt_path.to_string_lossy(),
            instruction,
        })
        .map_err(|e| Error::Scorer(e.to_string()))?;
        let out = self.exchange(&line);
        if out.is_err() {
            self.worker = None;
        }
        out
    }
}

pub enum ScorerAdapter {
    Mock,
    External(ExternalScorer),
}

impl ScorerAdapter {
    /// `"mock"` or any shell command line.
    pub fn from_spec(spec: &str, timeout: Duration) -> Self {
        match spec {
            "" | "mock" => ScorerAdapter::Mock,
            cmd => ScorerAdapter::External(ExternalScorer::new(cmd, timeout)),
        }
    }

    /// The external scorer reads the images from disk, so both paths must
    /// already hold the sample's source and target.
    pub fn score(&mut self, sample: &EditSample, src_path: &Path, tgt_path: &Path) -> Result<QualityScores> {
        match self {
            ScorerAdapter::Mock => Ok(mock_scores(sample)),
            ScorerAdapter::External(ext) => ext.score(src_path, tgt_path, &sample.instruction),
        }
    }
}

/// Score the sample and decide acceptance at `tau_q`.
pub fn quality_filter(
    sample: &mut EditSample,
    scorer: &mut ScorerAdapter,
    tau_q: f64,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<bool> {
    let scores = scorer.score(sample, src_path, tgt_path)?;
    sample.scores = Some(scores);
    Ok(scores.overall >= tau_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::grammar::Task;
    use crate::datapipe::objects::{extract_objects, gen_masks};
    use crate::datapipe::pairs::build_edit_pair;
    use crate::datapipe::world::gen_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn removal(seed: u64) -> EditSample {
        let (scene, _) = gen_scene(seed);
        let (recs, _) = extract_objects(&scene);
        let rec = gen_masks(&scene, recs, 0.5).remove(0);
        build_edit_pair(&scene, &rec, Task::Removal, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn constructed_pair_scores_full_marks() {
        let mut s = removal(4);
        let mut scorer = ScorerAdapter::Mock;
        let p = Path::new("unused");
        assert!(quality_filter(&mut s, &mut scorer, 7.0, p, p).unwrap());
        let q = s.scores.unwrap();
        assert_eq!(q.sc, 10.0);
        assert_eq!(q.overall, 10.0);
    }

    #[test]
    fn corrupted_background_lowers_score() {
        let clean = mock_scores(&removal(4));
        let mut s = removal(4);
        for y in 0..32 {
            for x in 0..32 {
                if !s.mask.get(x, y) {
                    s.target.set_pixel(x, y, [255, 0, 255]);
                }
            }
        }
        let dirty = mock_scores(&s);
        assert!(dirty.sc_overedit < 10.0);
        assert!(dirty.overall < clean.overall);
    }

    #[test]
    fn zero_threshold_accepts_everything() {
        let mut s = removal(6);
        s.target = s.source.clone();
        let p = Path::new("unused");
        assert!(quality_filter(&mut s, &mut ScorerAdapter::Mock, 0.0, p, p).unwrap());
        assert_eq!(s.scores.unwrap().overall, 0.0);
    }

    #[test]
    fn aggregate_is_geometric_mean_of_min() {
        let q = QualityScores::from_parts(4.0, 9.0, 9.0);
        assert_eq!(q.sc, 4.0);
        assert!((q.overall - 6.0).abs() < 1e-12);
    }

    #[test]
    fn external_round_trip_and_recovery() {
        let p = Path::new("/tmp/x.ppm");
        let mut ok = ExternalScorer::new(
            r#"while read l; do echo '{"sc_follow":8,"sc_overedit":9,"pq":2}'; done"#,
            Duration::from_secs(10),
        );
        let q = ok.score(p, p, "remove it.").unwrap();
        assert_eq!((q.sc, q.pq), (8.0, 2.0));
        assert_eq!(ok.score(p, p, "again").unwrap(), q);

        let mut garbled = ExternalScorer::new("while read l; do echo nope; done", Duration::from_secs(10));
        assert!(matches!(garbled.score(p, p, "x"), Err(Error::Scorer(_))));

        let mut silent = ExternalScorer::new("sleep 5", Duration::from_millis(200));
        assert!(matches!(silent.score(p, p, "x"), Err(Error::Scorer(_))));

        let mut range = ExternalScorer::new(
            r#"while read l; do echo '{"sc_follow":11,"sc_overedit":9,"pq":2}'; done"#,
            Duration::from_secs(10),
        );
        assert!(range.score(p, p, "x").is_err());
    }
}
