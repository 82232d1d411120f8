use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{oracle, render, Color, Direction, GridConfig, Instruction, MoveRule, SceneSpec, Shape, Sprite, SpriteId};
use crate::error::{Error, Result};
use crate::latentseq::ImageTensor;

/// Edit taxonomy, mirroring local / global / character-reference / text edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Local,
    Global,
    CharacterRef,
    TextLike,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Local, Category::Global, Category::CharacterRef, Category::TextLike];

    pub fn name(self) -> &'static str {
        match self {
            Category::Local => "local",
            Category::Global => "global",
            Category::CharacterRef => "character-ref",
            Category::TextLike => "text-like",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOp {
    Recolor,
    Remove,
    Move,
}

/// Relative weights of each category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryMix {
    pub local: f64,
    pub global: f64,
    pub character_ref: f64,
    pub text_like: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self { local: 0.5, global: 0.2, character_ref: 0.15, text_like: 0.15 }
    }
}

impl CategoryMix {
    pub fn only(cat: Category) -> Self {
        let mut m = Self { local: 0.0, global: 0.0, character_ref: 0.0, text_like: 0.0 };
        match cat {
            Category::Local => m.local = 1.0,
            Category::Global => m.global = 1.0,
            Category::CharacterRef => m.character_ref = 1.0,
            Category::TextLike => m.text_like = 1.0,
        }
        m
    }

    fn weights(&self) -> [f64; 4] {
        [self.local, self.global, self.character_ref, self.text_like]
    }

    /// Largest-remainder apportionment of `n` examples.
    pub fn counts(&self, n: usize) -> Result<[usize; 4]> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || total <= 0.0 {
            return Err(Error::Config(format!("invalid category weights {w:?}")));
        }
        let exact: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
        let mut counts = [0usize; 4];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if w[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default)]
    pub grid: GridConfig,
    pub min_sprites: usize,
    pub max_sprites: usize,
    #[serde(default)]
    pub mix: CategoryMix,
    pub local_ops: Vec<LocalOp>,
    #[serde(default)]
    pub move_rule: MoveRule,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            min_sprites: 2,
            max_sprites: 5,
            mix: CategoryMix::default(),
            local_ops: vec![LocalOp::Recolor, LocalOp::Remove, LocalOp::Move],
            move_rule: MoveRule::Clamp,
        }
    }
}

impl GenConfig {
    /// Recolor-only local edits.
    pub fn recolor() -> Self {
        Self { mix: CategoryMix::only(Category::Local), local_ops: vec![LocalOp::Recolor], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.min_sprites < 2 || self.min_sprites > self.max_sprites {
            return Err(Error::Config("need 2 <= min_sprites <= max_sprites".into()));
        }
        if self.max_sprites > self.grid.cells() || self.max_sprites > Color::ALL.len() - 1 {
            return Err(Error::Config(format!(
                "max_sprites {} does not fit the grid and palette",
                self.max_sprites
            )));
        }
        if self.mix.local > 0.0 && self.local_ops.is_empty() {
            return Err(Error::Config("local edits requested but no local_ops given".into()));
        }
        Ok(())
    }
}

/// One `(target | context, instruction)` triple with the scenes behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditExample {
    pub category: Category,
    pub instruction: Instruction,
    pub tokens: Vec<usize>,
    pub context_spec: SceneSpec,
    pub target_spec: SceneSpec,
    #[serde(skip)]
    pub context: Option<ImageTensor>,
    #[serde(skip)]
    pub target: Option<ImageTensor>,
}

impl EditExample {
    pub fn new(category: Category, context_spec: SceneSpec, instruction: Instruction, rule: MoveRule) -> Result<Self> {
        let tokens = instruction.tokens(&context_spec)?;
        let target_spec = oracle(&context_spec, &instruction, rule)?;
        Ok(Self {
            category,
            instruction,
            tokens,
            context: Some(render(&context_spec)),
            target: Some(render(&target_spec)),
            context_spec,
            target_spec,
        })
    }

    pub fn context_image(&self) -> ImageTensor {
        self.context.clone().unwrap_or_else(|| render(&self.context_spec))
    }

    pub fn target_image(&self) -> ImageTensor {
        self.target.clone().unwrap_or_else(|| render(&self.target_spec))
    }

    pub fn touched(&self) -> Vec<SpriteId> {
        self.instruction.touched(&self.context_spec)
    }
}

/// Random scene with distinct cells and distinct colors per sprite.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig, need_glyph: bool) -> SceneSpec {
    let n = rng.random_range(cfg.min_sprites..=cfg.max_sprites);
    let mut cells: Vec<usize> = (0..cfg.grid.cells()).collect();
    cells.shuffle(rng);
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(rng);
    let sprites = (0..n)
        .map(|i| {
            let shape = if need_glyph && i == 0 {
                *Shape::GLYPHS.choose(rng).expect("non-empty")
            } else {
                *Shape::ALL.choose(rng).expect("non-empty")
            };
            Sprite {
                id: i as SpriteId + 1,
                shape,
                color: colors[i],
                row: cells[i] / cfg.grid.cols,
                col: cells[i] % cfg.grid.cols,
            }
        })
        .collect();
    SceneSpec { grid: cfg.grid, sprites }
}

fn unused_color<R: Rng + ?Sized>(rng: &mut R, scene: &SceneSpec) -> Color {
    let free: Vec<Color> = Color::ALL.iter().copied().filter(|c| scene.sprites.iter().all(|s| s.color != *c)).collect();
    *free.choose(rng).expect("scenes leave at least one palette color free")
}

fn random_instruction<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig, cat: Category, scene: &SceneSpec) -> Instruction {
    let pick = |rng: &mut R| scene.sprites.choose(rng).expect("non-empty").id;
    match cat {
        Category::Local => match cfg.local_ops.choose(rng).expect("validated") {
            LocalOp::Recolor => Instruction::Recolor { sprite: pick(rng), color: unused_color(rng, scene) },
            LocalOp::Remove => Instruction::Remove { sprite: pick(rng) },
            LocalOp::Move => Instruction::Move { sprite: pick(rng), dir: *Direction::ALL.choose(rng).expect("non-empty") },
        },
        Category::Global => {
            let present: Vec<Color> = scene.sprites.iter().map(|s| s.color).collect();
            let a = *present.choose(rng).expect("non-empty");
            let b = loop {
                let c = *Color::ALL.choose(rng).expect("non-empty");
                if c != a {
                    break c;
                }
            };
            Instruction::SwapColors { a, b }
        }
        Category::CharacterRef => Instruction::Isolate {
            sprite: pick(rng),
            row: rng.random_range(0..cfg.grid.rows),
            col: rng.random_range(0..cfg.grid.cols),
        },
        Category::TextLike => {
            let glyphs: Vec<&Sprite> = scene.sprites.iter().filter(|s| s.shape.is_glyph()).collect();
            let s = glyphs.choose(rng).expect("scene generated with a glyph");
            let to = *Shape::GLYPHS.iter().filter(|g| **g != s.shape).collect::<Vec<_>>().choose(rng).expect("3 glyphs");
            Instruction::Reglyph { sprite: s.id, glyph: *to }
        }
    }
}

/// Deterministic (given the RNG state) list of `n` edit examples whose
/// category counts follow `cfg.mix`.
pub fn generate<R: Rng + ?Sized>(rng: &mut R, n: usize, cfg: &GenConfig) -> Result<Vec<EditExample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let counts = cfg.mix.counts(n)?;
    let mut cats: Vec<Category> = Category::ALL
        .iter()
        .zip(counts)
        .flat_map(|(c, k)| std::iter::repeat_n(*c, k))
        .collect();
    cats.shuffle(rng);
    cats.into_iter()
        .map(|cat| {
            let scene = random_scene(rng, cfg, cat == Category::TextLike);
            let ins = random_instruction(rng, cfg, cat, &scene);
            EditExample::new(cat, scene, ins, cfg.move_rule)
        })
        .collect()
}

/// A starting scene plus one recolor per turn, always aimed at the same
/// sprite so the others must survive every turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftScript {
    pub scene: SceneSpec,
    pub edits: Vec<Instruction>,
}

pub fn generate_drift_scripts<R: Rng + ?Sized>(
    rng: &mut R,
    scenes: usize,
    turns: usize,
    cfg: &GenConfig,
) -> Result<Vec<DriftScript>> {
    cfg.validate()?;
    if turns < 2 {
        return Err(Error::Config("drift scripts need at least 2 turns".into()));
    }
    (0..scenes)
        .map(|_| {
            let scene = random_scene(rng, cfg, false);
            let focus = scene.sprites.choose(rng).expect("non-empty").id;
            let mut cur = scene.clone();
            let mut edits = Vec::with_capacity(turns);
            for _ in 0..turns {
                let ins = Instruction::Recolor { sprite: focus, color: unused_color(rng, &cur) };
                cur = oracle(&cur, &ins, cfg.move_rule)?;
                edits.push(ins);
            }
            Ok(DriftScript { scene, edits })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = GenConfig::default();
        let a = generate(&mut ChaCha8Rng::seed_from_u64(4), 50, &cfg).unwrap();
        let b = generate(&mut ChaCha8Rng::seed_from_u64(4), 50, &cfg).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn category_counts_follow_mix() {
        let cfg = GenConfig::default();
        let data = generate(&mut ChaCha8Rng::seed_from_u64(5), 101, &cfg).unwrap();
        let expected = cfg.mix.counts(101).unwrap();
        assert_eq!(expected.iter().sum::<usize>(), 101);
        for (cat, want) in Category::ALL.iter().zip(expected) {
            let got = data.iter().filter(|e| e.category == *cat).count();
            assert_eq!(got, want);
            let exact = 101.0 * cfg.mix.weights()[cat_index(*cat)];
            assert!((got as f64 - exact).abs() < 1.0);
        }
    }

    fn cat_index(c: Category) -> usize {
        Category::ALL.iter().position(|x| *x == c).unwrap()
    }

    #[test]
    fn every_example_matches_oracle_render() {
        let cfg = GenConfig::default();
        for ex in generate(&mut ChaCha8Rng::seed_from_u64(6), 200, &cfg).unwrap() {
            let parsed = Instruction::parse(&ex.tokens, &ex.context_spec).unwrap();
            assert_eq!(parsed, ex.instruction);
            let expect = oracle(&ex.context_spec, &ex.instruction, cfg.move_rule).unwrap();
            assert_eq!(ex.target_spec, expect);
            assert_eq!(ex.target.as_ref().unwrap(), &render(&expect));
            ex.context_spec.validate().unwrap();
            ex.target_spec.validate().unwrap();
        }
    }

    #[test]
    fn drift_scripts_only_touch_focus() {
        let cfg = GenConfig { min_sprites: 3, ..GenConfig::recolor() };
        for script in generate_drift_scripts(&mut ChaCha8Rng::seed_from_u64(7), 10, 5, &cfg).unwrap() {
            assert_eq!(script.edits.len(), 5);
            let mut ids: Vec<_> = script.edits.iter().map(|e| e.touched(&script.scene)).collect();
            ids.dedup();
            assert_eq!(ids.len(), 1);
        }
    }
}
