#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SCHEMA: &str = r#"name = "toy"
[rating_scale]
min = 1
max = 5
[[categories]]
name = "gender"
values = ["Man", "Woman"]
[[categories]]
name = "age"
values = ["young", "old"]
"#;

const WORDS: [&str; 12] = ["bad", "good", "rude", "kind", "awful", "nice", "calm", "angry", "fine", "mean", "warm", "cold"];

/// Toy corpus in which gender shifts ratings by `±shift` around 3 and age is noise.
pub struct Toy {
    pub instances: usize,
    pub annotators: usize,
    pub per_instance: usize,
    pub shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for Toy {
    fn default() -> Self {
        Self { instances: 40, annotators: 16, per_instance: 5, shift: 1.5, noise: 0.5, seed: 1 }
    }
}

pub struct ToyFiles {
    pub schema: PathBuf,
    pub annotations: PathBuf,
    pub profiles: PathBuf,
}

impl Toy {
    pub fn write(&self, dir: &Path) -> ToyFiles {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise).unwrap();
        let files = ToyFiles {
            schema: dir.join("schema.toml"),
            annotations: dir.join("annotations.jsonl"),
            profiles: dir.join("profiles.jsonl"),
        };
        std::fs::write(&files.schema, SCHEMA).unwrap();
        let profiles: Vec<(String, &str, &str)> = (0..self.annotators)
            .map(|a| (format!("a{a}"), if a % 2 == 0 { "Man" } else { "Woman" }, if rng.random_bool(0.5) { "young" } else { "old" }))
            .collect();
        let mut text = String::new();
        for (id, g, a) in &profiles {
            text.push_str(&serde_json::json!({"annotator_id": id, "gender": g, "age": a}).to_string());
            text.push('\n');
        }
        std::fs::write(&files.profiles, text).unwrap();
        let mut text = String::new();
        for i in 0..self.instances {
            let words: Vec<&str> = (0..6).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let mut chosen: Vec<usize> = (0..self.annotators).collect();
            for k in 0..self.per_instance {
                let j = rng.random_range(k..chosen.len());
                chosen.swap(k, j);
            }
            for (k, &a) in chosen[..self.per_instance].iter().enumerate() {
                let (id, g, _) = &profiles[a];
                let mean = if *g == "Woman" { 3.0 + self.shift } else { 3.0 - self.shift };
                let rating = (mean + noise.sample(&mut rng)).round().clamp(1.0, 5.0);
                let mut row = serde_json::json!({"instance_id": format!("i{i}"), "annotator_id": id, "rating": rating});
                if k == 0 {
                    row["text"] = words.join(" ").into();
                }
                text.push_str(&row.to_string());
                text.push('\n');
            }
        }
        std::fs::write(&files.annotations, text).unwrap();
        files
    }

    /// Writes the corpus plus a config file pointing at it.
    pub fn config(&self, dir: &Path, extra: &str) -> PathBuf {
        let f = self.write(dir);
        let path = dir.join("config.toml");
        let text = format!(
            "preset = \"offensiveness\"\n{extra}\n[data]\nschema = {:?}\nannotations = {:?}\nprofiles = {:?}\n",
            f.schema, f.annotations, f.profiles
        );
        std::fs::write(&path, text).unwrap();
        path
    }
}

pub fn dissent<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_dissent")).args(args).env_remove("DISSENT_API_KEY").output().unwrap()
}

pub fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
