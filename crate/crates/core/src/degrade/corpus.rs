use super::{apply_rir, mix_at_snr, save_manifest, tile_noise, CorpusEntry, Rir, Split};
use crate::signal::{read_wav, write_wav, Waveform};
use crate::{Error, Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// How to apportion utterances between train/valid/test, as integer
/// weights (for example 8/1/1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl SplitSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "split spec `{s}` must look like train/valid/test, e.g. 8/1/1"
            )));
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::config(format!("split spec `{s}`: `{p}` is not a count")))
            })
            .collect::<Result<_>>()?;
        let spec = SplitSpec {
            train: nums[0],
            valid: nums[1],
            test: nums[2],
        };
        if spec.train == 0 || spec.train + spec.valid + spec.test == 0 {
            return Err(Error::config(format!(
                "split spec `{s}` must give the train split nonzero weight"
            )));
        }
        Ok(spec)
    }

    /// Largest-remainder apportionment of `n` utterances.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let weights = [self.train as f64, self.valid as f64, self.test as f64];
        let total: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest: usize = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .partial_cmp(&(exact[a] - exact[a].floor()))
                .unwrap()
                .then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        (counts[0], counts[1], counts[2])
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub snr_list: Vec<f64>,
    pub split: SplitSpec,
    pub seed: u64,
}

/// Outcome of [`synthesize_corpus`]: the entries that were written (also
/// saved to `<out_dir>/manifest.jsonl`).
#[derive(Debug)]
pub struct CorpusSummary {
    pub manifest_path: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|r| r.ok().map(|d| d.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!(
            "no .wav files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Pool partition: when a pool holds at least two items, its tail fifth
/// (at least one item) is reserved for the test split so test-time noise,
/// room and SNR identities stay unseen during training.
fn pool_ranges(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    if n >= 2 {
        let reserved = (n.div_ceil(5)).max(1);
        (0..n - reserved, n - reserved..n)
    } else {
        (0..n, 0..n)
    }
}

struct Draw {
    id: String,
    clean: PathBuf,
    noise: PathBuf,
    rir: PathBuf,
    snr_db: f64,
    split: Split,
    noise_offset: usize,
}

/// Build a degraded corpus: for every clean utterance, convolve with a
/// seeded-chosen RIR, add a seeded-chosen noise at a seeded-chosen SNR,
/// and write degraded / reverberation-free noisy / scaled-noise / prepared
/// RIR files plus a sorted JSONL manifest.
pub fn synthesize_corpus(
    clean_dir: &Path,
    noise_dir: &Path,
    rir_dir: &Path,
    out_dir: &Path,
    config: &CorpusConfig,
) -> Result<CorpusSummary> {
    if config.snr_list.is_empty() {
        return Err(Error::config("empty snr_list"));
    }
    if config.snr_list.iter().any(|s| !s.is_finite()) {
        return Err(Error::config("snr_list contains a non-finite value"));
    }
    let clean_files = list_wavs(clean_dir)?;
    let noise_files = list_wavs(noise_dir)?;
    let rir_files = list_wavs(rir_dir)?;

    let n = clean_files.len();
    let (n_train, n_valid, _) = config.split.counts(n);
    let (noise_main, noise_test) = pool_ranges(noise_files.len());
    let (rir_main, rir_test) = pool_ranges(rir_files.len());
    let (snr_main, snr_test) = pool_ranges(config.snr_list.len());

    // All random choices happen up front in sorted-id order from one
    // seeded stream, so the corpus is a pure function of (inputs, seed).
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draws = Vec::with_capacity(n);
    for (i, clean) in clean_files.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        let (np, rp, sp) = if split == Split::Test {
            (&noise_test, &rir_test, &snr_test)
        } else {
            (&noise_main, &rir_main, &snr_main)
        };
        draws.push(Draw {
            id: stem(clean),
            clean: clean.clone(),
            noise: noise_files[rng.random_range(np.clone())].clone(),
            rir: rir_files[rng.random_range(rp.clone())].clone(),
            snr_db: config.snr_list[rng.random_range(sp.clone())],
            split,
            noise_offset: rng.random_range(0..1 << 20),
        });
    }

    for sub in ["degraded", "noisy", "noise", "rir"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    let mut entries: Vec<CorpusEntry> = draws
        .par_iter()
        .map(|d| render_one(d, out_dir, config.sample_rate))
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &entries)?;
    Ok(CorpusSummary {
        manifest_path,
        entries,
    })
}

fn render_one(d: &Draw, out_dir: &Path, sample_rate: u32) -> Result<CorpusEntry> {
    let clean: Waveform<f64> = read_wav(&d.clean, Some(sample_rate))?;
    let noise: Waveform<f64> = read_wav(&d.noise, Some(sample_rate))?;
    let rir_wave: Waveform<f64> = read_wav(&d.rir, Some(sample_rate))?;
    let rir = Rir::from_waveform(&rir_wave)?;

    let (reverbed, norm_gain) = apply_rir(&clean, &rir)?;
    let tiled = tile_noise(&noise, clean.len(), d.noise_offset)?;
    let (degraded, scaled_noise) = mix_at_snr(&reverbed, &tiled, d.snr_db)?;
    let noisy = Waveform::new(
        clean
            .samples()
            .iter()
            .zip(scaled_noise.samples().iter())
            .map(|(&c, &v)| c + v)
            .collect(),
        sample_rate,
    )?;

    let rel = |sub: &str| format!("{sub}/{}.wav", d.id);
    write_wav(&out_dir.join(rel("degraded")), &degraded)?;
    write_wav(&out_dir.join(rel("noisy")), &noisy)?;
    write_wav(&out_dir.join(rel("noise")), &scaled_noise)?;
    write_wav(&out_dir.join(rel("rir")), &rir.to_waveform())?;

    Ok(CorpusEntry {
        id: d.id.clone(),
        clean_path: d.clean.to_string_lossy().into_owned(),
        noise_path: rel("noise"),
        rir_path: rel("rir"),
        degraded_path: rel("degraded"),
        noisy_path: rel("noisy"),
        snr_db: d.snr_db,
        room_label: stem(&d.rir),
        split: d.split,
        norm_gain: norm_gain.as_f64(),
    })
}
