use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use dflshield_core::scenario::{
    write_atomic, NodeHandle, NodeLaunch, NodeLauncher, NodeResult, ScenarioConfig, ScenarioError,
};

/// Starts every participant as a child `dflshield node` process.
pub struct ProcessLauncher {
    exe: PathBuf,
    dir: PathBuf,
    base: Option<PathBuf>,
}

impl ProcessLauncher {
    pub fn new(dir: &Path, base: Option<PathBuf>) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ProcessLauncher {
            exe: std::env::current_exe()?,
            dir: dir.to_path_buf(),
            base,
        })
    }
}

struct ProcessHandle {
    child: Child,
    stdout: thread::JoinHandle<String>,
    id: u32,
}

impl NodeHandle for ProcessHandle {
    fn join(mut self: Box<Self>, deadline: Instant) -> Result<NodeResult, ScenarioError> {
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) if Instant::now() >= deadline => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    break None;
                }
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(ScenarioError::Runtime(e.to_string())),
            }
        };
        let out = self
            .stdout
            .join()
            .map_err(|_| ScenarioError::Runtime("stdout reader panicked".into()))?;
        match status {
            Some(s) if s.success() => serde_json::from_str(&out)
                .map_err(|e| ScenarioError::Runtime(format!("node {}: bad result: {e}", self.id))),
            Some(s) => Err(ScenarioError::Runtime(format!("node {} exited with {s}", self.id))),
            None => Err(ScenarioError::Runtime(format!("node {} did not finish in time", self.id))),
        }
    }
}

impl NodeLauncher for ProcessLauncher {
    fn launch(
        &self,
        cfg: &ScenarioConfig,
        _base: Option<&Path>,
        launch: NodeLaunch,
    ) -> Result<Box<dyn NodeHandle>, ScenarioError> {
        let config = self.dir.join(".launch.toml");
        if !config.exists() {
            write_atomic(&config, cfg.to_toml()?.as_bytes()).map_err(|e| ScenarioError::Io(e.to_string()))?;
        }
        let mut cmd = Command::new(&self.exe);
        cmd.arg("node")
            .arg("--config")
            .arg(&config)
            .args(["--id", &launch.id.0.to_string()])
            .args(["--address", &launch.address.to_string()])
            .args(["--controller", &launch.controller.to_string()])
            .args(["--linger-ms", &launch.linger_ms.to_string()])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(b) = &self.base {
            cmd.arg("--base").arg(b);
        }
        let mut child = cmd.spawn().map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        let mut pipe = child.stdout.take().expect("piped stdout");
        let stdout = thread::spawn(move || {
            let mut s = String::new();
            let _ = pipe.read_to_string(&mut s);
            s
        });
        Ok(Box::new(ProcessHandle {
            child,
            stdout,
            id: launch.id.0,
        }))
    }
}

impl Drop for ProcessLauncher {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.dir.join(".launch.toml"));
    }
}
