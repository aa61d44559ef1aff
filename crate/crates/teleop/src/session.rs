use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ndarray::Array2;
use quadamp::amp::{disc_observation, pair_features, Discriminator, AMP_PAIR_DIM};
use quadamp::checkpoint::Checkpoint;
use quadamp::config::TrainConfig;
use quadamp::eval::{Actor, PolicyActor};
use quadamp::rewards::{CommandTarget, MIN_COT_SPEED};
use quadamp::sim::{self, check_termination, EpisodeParams, SimError, SimState};
use quadamp::trainer::joint_state_at_rest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::broadcast;

use crate::protocol::{encode_error, encode_frame, Frame};

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOptions {
    pub rate_hz: f64,
    /// Commands older than this are replaced by a stop command.
    pub watchdog: Duration,
    /// Frames buffered per client before the oldest are dropped.
    pub queue_capacity: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { rate_hz: 30.0, watchdog: Duration::from_secs(5), queue_capacity: 60 }
    }
}

/// Latest command from the client, the only state shared with the
/// simulation thread.
#[derive(Debug)]
pub struct CommandCell {
    inner: Mutex<(CommandTarget, Instant)>,
}

impl CommandCell {
    pub fn new() -> Self {
        CommandCell { inner: Mutex::new((CommandTarget::default(), Instant::now())) }
    }

    pub fn set(&self, cmd: CommandTarget) {
        *self.inner.lock().expect("command cell poisoned") = (cmd, Instant::now());
    }

    /// The current command, or zero once `watchdog` has passed since the last update.
    pub fn get(&self, now: Instant, watchdog: Duration) -> CommandTarget {
        let (cmd, at) = *self.inner.lock().expect("command cell poisoned");
        if now.saturating_duration_since(at) > watchdog {
            CommandTarget::default()
        } else {
            cmd
        }
    }
}

impl Default for CommandCell {
    fn default() -> Self {
        Self::new()
    }
}

/// One simulated robot driven by a policy.
pub struct TeleopSession {
    pub config: TrainConfig,
    actor: Box<dyn Actor + Send>,
    disc: Discriminator,
    params: EpisodeParams,
    state: SimState,
    rng: ChaCha8Rng,
}

impl TeleopSession {
    pub fn new(config: TrainConfig, actor: Box<dyn Actor + Send>, disc: Discriminator) -> Self {
        let params = EpisodeParams::nominal(&config.sim);
        let state = Self::rest_state(&config);
        TeleopSession { config, actor, disc, params, state, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self::new(ckpt.config.clone(), Box::new(PolicyActor::from_checkpoint(ckpt, false)), ckpt.disc.clone())
    }

    fn rest_state(config: &TrainConfig) -> SimState {
        let (base, joints) = joint_state_at_rest(&config.morphology);
        sim::reset_from_reference(&config.morphology, &config.sim, &base, &joints)
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state = Self::rest_state(&self.config);
    }

    /// Advances one policy step. A fall resets the robot after the frame is produced.
    pub fn step(&mut self, cmd: &CommandTarget) -> Result<Frame, SimError> {
        let morph = &self.config.morphology;
        let action = self.actor.act(&self.state, cmd, &mut self.rng);
        let next = match sim::step(morph, &self.config.sim, &self.params, &self.state, &action) {
            Ok(next) => next,
            Err(e) => {
                self.reset();
                return Err(e);
            }
        };
        let pair = pair_features(
            &disc_observation(morph, &self.state.base, &self.state.joints),
            &disc_observation(morph, &next.base, &next.joints),
        );
        let pair = Array2::from_shape_vec((1, AMP_PAIR_DIM), pair.to_vec()).expect("one row");
        let r_style = self.disc.style_rewards(pair.view()).map(|r| r[0]).unwrap_or(0.0);
        let dt = self.config.sim.policy_dt();
        let speed = next.base.vx.abs();
        let cot = (speed >= MIN_COT_SPEED).then(|| (next.energy - self.state.energy) / (dt * morph.weight() * speed));
        let frame = Frame::from_state(morph, &next, cmd, r_style, cot);
        self.state = next;
        if check_termination(&self.state, &self.config.sim) {
            self.reset();
        }
        Ok(frame)
    }
}

/// Handles owned by the network side of a running session.
pub struct SessionHandle {
    pub commands: Arc<CommandCell>,
    pub reset: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SessionHandle {
    pub fn request_reset(&self) {
        self.reset.store(true, Ordering::SeqCst);
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Runs `session` on its own thread at `options.rate_hz` wall-clock rate,
/// publishing encoded frames to `frames`. Sleeps are measured against a
/// fixed schedule so per-step work does not accumulate as drift.
pub fn spawn_session(mut session: TeleopSession, options: SessionOptions, frames: broadcast::Sender<String>) -> SessionHandle {
    let commands = Arc::new(CommandCell::new());
    let reset = Arc::new(AtomicBool::new(false));
    let stop = Arc::new(AtomicBool::new(false));
    let (c, r, s) = (commands.clone(), reset.clone(), stop.clone());
    let period = Duration::from_secs_f64(1.0 / options.rate_hz);
    let thread = std::thread::spawn(move || {
        let mut deadline = Instant::now();
        while !s.load(Ordering::SeqCst) {
            if r.swap(false, Ordering::SeqCst) {
                session.reset();
            }
            let cmd = c.get(Instant::now(), options.watchdog);
            let message = match session.step(&cmd) {
                Ok(frame) => encode_frame(&frame),
                Err(e) => encode_error(&e.to_string()),
            };
            // No receivers just means the client is gone; the stop flag follows.
            let _ = frames.send(message);
            deadline += period;
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            } else {
                deadline = now;
            }
        }
    });
    SessionHandle { commands, reset, stop, thread: Some(thread) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use quadamp::eval::FixedPose;
    use rand::SeedableRng;

    fn standing_session() -> TeleopSession {
        let config = TrainConfig::desk();
        let (_, joints) = joint_state_at_rest(&config.morphology);
        let disc = Discriminator::new(&[8], 10.0, &mut ChaCha8Rng::seed_from_u64(3));
        TeleopSession::new(config, Box::new(FixedPose(joints.q)), disc)
    }

    #[test]
    fn resting_frames() {
        let mut s = standing_session();
        let mut frame = None;
        for _ in 0..30 {
            frame = Some(s.step(&CommandTarget::default()).unwrap());
        }
        let f = frame.unwrap();
        assert_eq!(f.contacts, [true; 4]);
        assert!(f.v_meas.vx.abs() < 1e-2);
        assert!((0.0..=1.0).contains(&f.r_style));
        assert!(f.cot_instant.is_none());
        assert!((f.t - 1.0).abs() < 1e-9);
    }

    #[test]
    fn watchdog_zeroes_stale_commands() {
        let cell = CommandCell::new();
        cell.set(CommandTarget::forward(0.8));
        let now = Instant::now();
        assert_eq!(cell.get(now, Duration::from_secs(5)).vx, 0.8);
        assert_eq!(cell.get(now + Duration::from_secs(6), Duration::from_secs(5)), CommandTarget::default());
    }

    #[test]
    fn reset_returns_to_rest() {
        let mut s = standing_session();
        let rest = s.state().clone();
        for _ in 0..5 {
            s.step(&CommandTarget::forward(1.0)).unwrap();
        }
        s.reset();
        assert_eq!(s.state(), &rest);
    }

    #[test]
    fn lagging_receiver_loses_oldest_frames() {
        let (tx, mut rx) = broadcast::channel(8);
        let options = SessionOptions { rate_hz: 200.0, queue_capacity: 8, ..SessionOptions::default() };
        let mut handle = spawn_session(standing_session(), options, tx);
        std::thread::sleep(Duration::from_millis(300));
        let lagged = rx.try_recv();
        assert!(matches!(lagged, Err(broadcast::error::TryRecvError::Lagged(n)) if n > 0), "{lagged:?}");
        let mut held = 0;
        while rx.try_recv().is_ok() {
            held += 1;
        }
        assert!(held <= 8 + 2, "{held} frames buffered");
        handle.stop();
    }
}
