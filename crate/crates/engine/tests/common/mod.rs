#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bikelane::config::{Config, DEFAULT_CONFIG};
use bikelane::core::domain::{SceneMeta, SceneSource, StreetScene};
use bikelane::orchestrator::{Clock, Engine};
use bikelane::providers::mock::MockSuite;
use bikelane::providers::{Capability, Providers, VirtualClock};
use bikelane::synth;

/// Default config with every provider mocked and runs under `dir/runs`.
pub fn config(dir: &Path) -> Config {
    let mut cfg = Config::parse(DEFAULT_CONFIG).unwrap().with_mocks();
    cfg.resolve_paths(dir);
    cfg.pipeline.runs_dir = dir.join("runs");
    cfg
}

pub fn providers(suite: &MockSuite) -> Providers {
    let mut b = Providers::builder().sleeper(Arc::new(VirtualClock::default()));
    for cap in Capability::ALL {
        b = b.backend(cap, suite.get(cap), 4);
    }
    b.build().unwrap()
}

/// Monotonic fake timestamps so logs differ only where they should.
pub fn counter_clock() -> Clock {
    let n = Arc::new(AtomicU64::new(0));
    Arc::new(move || format!("2025-01-01T00:00:{:02}.000Z", n.fetch_add(1, Ordering::SeqCst) % 60))
}

pub fn engine(dir: &Path, suite: MockSuite) -> Engine {
    Engine::new(config(dir), providers(&suite))
        .unwrap()
        .with_clock(counter_clock())
}

pub fn engine_with(cfg: Config, suite: MockSuite) -> Engine {
    Engine::new(cfg, providers(&suite)).unwrap().with_clock(counter_clock())
}

pub fn scene(size: u32, variant: u64) -> StreetScene {
    StreetScene {
        meta: SceneMeta {
            scene_id: format!("test-{variant}"),
            latitude: 40.0,
            longitude: -74.0,
            heading: 90.0,
            pitch: 0.0,
            fov: 90.0,
            width: size,
            height: size,
            source: SceneSource::LocalFile,
        },
        image: synth::street_scene(size, size, variant),
    }
}
