//! Synthetic bi-temporal scenes rendered from random damage masks.

use cdvqa_core::qa::generate_all;
use cdvqa_core::{AnswerVocabulary, Label, QaItem, SemanticMask};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Region names with a short event description and a typical damage level.
pub const REGIONS: [(&str, &str, f64); 10] = [
    ("Bata", "ammunition depot explosion in Bata, Equatorial Guinea", 0.45),
    ("Beirut", "port warehouse explosion in Beirut, Lebanon", 0.55),
    ("Goma", "volcanic eruption and lava flows near Goma, Democratic Republic of the Congo", 0.35),
    ("Les Cayes", "earthquake shaking around Les Cayes, Haiti", 0.5),
    ("Hawaii", "wind-driven wildfire across Maui, Hawaii", 0.8),
    ("La Palma", "volcanic eruption on La Palma, Canary Islands", 0.6),
    ("Derna", "dam failure flood through Derna, Libya", 0.65),
    ("Marshall", "grass wildfire in Marshall, Colorado", 0.3),
    ("Moulay Brahim", "mountain earthquake near Moulay Brahim, Morocco", 0.4),
    ("Antakya", "major earthquake sequence in Antakya, Turkey", 0.7),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskConfig {
    pub seed: u64,
    /// Square mask side in pixels.
    pub size: usize,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    /// QA items drawn from the training scenes.
    pub train_samples: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            train_scenes: 32,
            heldout_scenes: 16,
            train_samples: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: String,
    pub region: &'static str,
    pub description: String,
    pub mask: SemanticMask,
    /// `(3, H, W)` pre-event rendering; every building is intact.
    pub pre: Vec<f64>,
    /// `(H, W)` post-event rendering.
    pub post: Vec<f64>,
}

/// One QA item about scene `scene` of its split.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: usize,
    pub item: QaItem,
    /// Index into the standard answer vocabulary.
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub scenes: Vec<SceneRecord>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub train: Split,
    pub heldout: Split,
}

/// Random rectangular buildings; each is intact, damaged or destroyed with
/// odds set by `damage` in `[0, 1]`.
pub fn synth_mask<R: Rng>(rng: &mut R, size: usize, damage: f64) -> SemanticMask {
    let mut labels = vec![Label::Background; size * size];
    let count = if rng.random_bool(0.05) { 0 } else { rng.random_range(4..=14) };
    let max_side = (size / 4).max(2);
    for _ in 0..count {
        let bw = rng.random_range(2..=max_side).min(size);
        let bh = rng.random_range(2..=max_side).min(size);
        let x0 = rng.random_range(0..=size - bw);
        let y0 = rng.random_range(0..=size - bh);
        let r: f64 = rng.random();
        let label = if r < 0.5 * damage {
            Label::Destroyed
        } else if r < damage {
            Label::Damaged
        } else {
            Label::Intact
        };
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                labels[y * size + x] = label;
            }
        }
    }
    SemanticMask::new(size, size, labels).expect("square grid")
}

/// Pre- and post-event images for `mask`.
///
/// Background is dark, intact roofs are gray, damaged roofs are half as
/// bright, and destroyed footprints are speckled rubble.
pub fn render<R: Rng>(rng: &mut R, mask: &SemanticMask) -> (Vec<f64>, Vec<f64>) {
    let hw = mask.width() * mask.height();
    let mut pre = vec![0.0; 3 * hw];
    let mut post = vec![0.0; hw];
    let tint = [1.0, 0.92, 0.85];
    for (i, &label) in mask.labels().iter().enumerate() {
        let building = label.is_building();
        for (c, t) in tint.iter().enumerate() {
            let base = if building { 0.65 * t } else { 0.15 };
            pre[c * hw + i] = base + rng.random_range(-0.03..0.03);
        }
        post[i] = match label {
            Label::Background => 0.15,
            Label::Intact => 0.65,
            Label::Damaged => 0.33,
            Label::Destroyed => {
                if rng.random_bool(0.5) {
                    0.9
                } else {
                    0.05
                }
            }
        } + rng.random_range(-0.03..0.03);
    }
    (pre, post)
}

fn make_split(rng: &mut ChaCha8Rng, config: &TaskConfig, prefix: &str, scenes: usize) -> Split {
    let vocab = AnswerVocabulary::standard();
    let mut records = Vec::with_capacity(scenes);
    let mut samples = Vec::new();
    for s in 0..scenes {
        let (region, event, level) = REGIONS[rng.random_range(0..REGIONS.len())];
        let damage = (level + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0);
        let mask = synth_mask(rng, config.size, damage);
        let (pre, post) = render(rng, &mask);
        let image_id = format!("{prefix}-{s:04}");
        for item in generate_all(&mask, &image_id) {
            samples.push(Sample {
                scene: s,
                gold: vocab.index_of(item.answer),
                item,
            });
        }
        records.push(SceneRecord {
            image_id,
            region,
            description: format!("{region}: {event}."),
            mask,
            pre,
            post,
        });
    }
    Split {
        scenes: records,
        samples,
    }
}

impl SyntheticTask {
    pub fn generate(config: TaskConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut train = make_split(&mut rng, &config, "train", config.train_scenes);
        train.samples.shuffle(&mut rng);
        train.samples.truncate(config.train_samples);
        let heldout = make_split(&mut rng, &config, "heldout", config.heldout_scenes);
        Self { config, train, heldout }
    }
}

/// Most frequent gold index of `samples` and the accuracy of always
/// answering it. Ties go to the lower index.
pub fn majority_baseline(samples: &[Sample], classes: usize) -> (usize, f64) {
    let mut counts = vec![0usize; classes];
    for s in samples {
        counts[s.gold] += 1;
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
    (best, n as f64 / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdvqa_core::count_labels;

    #[test]
    fn gold_answers_are_generator_outputs() {
        let task = SyntheticTask::generate(TaskConfig {
            train_scenes: 3,
            heldout_scenes: 2,
            train_samples: 50,
            size: 32,
            ..Default::default()
        });
        assert_eq!(task.train.samples.len(), 50);
        assert_eq!(task.heldout.samples.len(), 80);
        let vocab = AnswerVocabulary::standard();
        for s in task.train.samples.iter().chain(&task.heldout.samples) {
            assert_eq!(vocab.token(s.gold), Some(s.item.answer));
        }
        for (i, scene) in task.heldout.scenes.iter().enumerate() {
            let again = generate_all(&scene.mask, &scene.image_id);
            let items: Vec<&QaItem> = task.heldout.samples.iter().filter(|s| s.scene == i).map(|s| &s.item).collect();
            assert_eq!(items.len(), 40);
            for (a, b) in again.iter().zip(items) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let c = TaskConfig {
            train_scenes: 2,
            heldout_scenes: 1,
            train_samples: 10,
            size: 16,
            ..Default::default()
        };
        assert_eq!(SyntheticTask::generate(c.clone()), SyntheticTask::generate(c));
    }

    #[test]
    fn rendering_follows_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = SemanticMask::from_rows(&[&[0, 1], &[2, 3]]).unwrap();
        let (pre, post) = render(&mut rng, &mask);
        assert_eq!(pre.len(), 12);
        assert!(pre[0] < 0.2 && pre[3] > 0.5);
        assert!(post[0] < 0.2 && post[1] > 0.6 && (post[2] - 0.33).abs() < 0.05);
    }

    #[test]
    fn damage_level_controls_destruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = synth_mask(&mut rng, 32, 0.0);
        assert_eq!(count_labels(&mask).n_destruction(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = synth_mask(&mut rng, 32, 1.0);
        assert_eq!(count_labels(&mask).get(Label::Intact), 0);
    }

    #[test]
    fn majority_baseline_counts() {
        let mk = |g| Sample {
            scene: 0,
            gold: g,
            item: QaItem {
                image_id: String::new(),
                template_id: String::new(),
                category: cdvqa_core::QuestionCategory::Spatial,
                question: String::new(),
                answer: cdvqa_core::AnswerToken::Yes,
            },
        };
        let samples = vec![mk(2), mk(1), mk(2), mk(1), mk(0)];
        assert_eq!(majority_baseline(&samples, 3), (1, 0.4));
    }
}
