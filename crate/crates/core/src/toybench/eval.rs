use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    identity_score, oracle, parse, render, score_edit, Category, DriftScript, EditExample, GridConfig, Instruction,
    MoveRule, ParsedCell, SceneSpec, Sprite, SpriteId, BACKGROUND,
};
use crate::error::{Error, Result};
use crate::latentseq::ImageTensor;
use crate::sampler::{FlowModel, SamplerConfig};

/// Anything that maps an optional context image and instruction tokens to an
/// output image.
pub trait EditModel: Sync {
    fn edit(&self, context: Option<&ImageTensor>, tokens: &[usize], seed: u64) -> Result<ImageTensor>;
}

/// The flow model driven by a fixed sampler configuration; the per-call seed
/// replaces `cfg.seed`.
pub struct FlowEditor<'a> {
    pub model: &'a FlowModel,
    pub cfg: SamplerConfig,
}

impl EditModel for FlowEditor<'_> {
    fn edit(&self, context: Option<&ImageTensor>, tokens: &[usize], seed: u64) -> Result<ImageTensor> {
        let cfg = SamplerConfig { seed, ..self.cfg.clone() };
        let contexts: Vec<&ImageTensor> = context.into_iter().collect();
        self.model.edit(&contexts, tokens, &cfg)
    }
}

/// Parses the context, applies the ground-truth transformation and renders
/// the result. Without a context it returns an empty canvas.
pub struct OracleEditor {
    pub grid: GridConfig,
    pub rule: MoveRule,
}

impl EditModel for OracleEditor {
    fn edit(&self, context: Option<&ImageTensor>, tokens: &[usize], _seed: u64) -> Result<ImageTensor> {
        let Some(img) = context else {
            return Ok(ImageTensor::filled(3, self.grid.height(), self.grid.width(), BACKGROUND));
        };
        let scene = scene_from_cells(self.grid, &parse(img, self.grid))?;
        let ins = Instruction::parse(tokens, &scene)?;
        Ok(render(&oracle(&scene, &ins, self.rule)?))
    }
}

/// Copies the context and overwrites one random cell with noise per call.
/// Damage accumulates over turns and is never repaired.
pub struct CorruptingEditor {
    pub grid: GridConfig,
}

impl EditModel for CorruptingEditor {
    fn edit(&self, context: Option<&ImageTensor>, _tokens: &[usize], seed: u64) -> Result<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = match context {
            Some(c) => c.clone(),
            None => ImageTensor::filled(3, self.grid.height(), self.grid.width(), BACKGROUND),
        };
        let cell = rng.random_range(0..self.grid.cells());
        let (r, c) = (cell / self.grid.cols, cell % self.grid.cols);
        let p = self.grid.cell_px;
        for y in r * p..(r + 1) * p {
            for x in c * p..(c + 1) * p {
                for v in img.pixel_mut(y, x) {
                    *v = rng.random::<f32>();
                }
            }
        }
        Ok(img)
    }
}

/// Rebuilds a scene from parsed cells, numbering sprites in row-major order.
pub fn scene_from_cells(grid: GridConfig, cells: &[ParsedCell]) -> Result<SceneSpec> {
    let mut sprites = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match cell {
            Ok(Some((shape, color))) => sprites.push(Sprite {
                id: sprites.len() as SpriteId,
                shape: *shape,
                color: *color,
                row: i / grid.cols,
                col: i % grid.cols,
            }),
            Ok(None) => {}
            Err(()) => return Err(Error::Scene(format!("cell {i} does not parse"))),
        }
    }
    SceneSpec::new(grid, sprites)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScore {
    pub category: Category,
    pub n: usize,
    pub accuracy: f64,
    pub identity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftRow {
    pub turn: usize,
    pub identity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub categories: Vec<CategoryScore>,
    pub drift: Vec<DriftRow>,
}

impl EvalReport {
    pub fn examples(&self) -> usize {
        self.categories.iter().map(|c| c.n).sum()
    }

    fn weighted(&self, f: impl Fn(&CategoryScore) -> f64) -> f64 {
        let n = self.examples();
        if n == 0 {
            return 0.0;
        }
        self.categories.iter().map(|c| f(c) * c.n as f64).sum::<f64>() / n as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.weighted(|c| c.accuracy)
    }

    pub fn identity(&self) -> f64 {
        self.weighted(|c| c.identity)
    }

    pub fn edits_csv(&self) -> String {
        let mut s = String::from("category,n,accuracy,identity\n");
        for c in &self.categories {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", c.category.name(), c.n, c.accuracy, c.identity);
        }
        s
    }

    pub fn drift_csv(&self) -> String {
        let mut s = String::from("turn,identity,accuracy\n");
        for r in &self.drift {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.turn, r.identity, r.accuracy);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if !self.categories.is_empty() {
            let _ = writeln!(s, "{} examples: accuracy {:.4}, identity {:.4}", self.examples(), self.accuracy(), self.identity());
            for c in &self.categories {
                let _ = writeln!(s, "  {:<14} n={:<5} accuracy {:.4}  identity {:.4}", c.category.name(), c.n, c.accuracy, c.identity);
            }
        }
        for r in &self.drift {
            let _ = writeln!(s, "turn {:>2}: identity {:.4}  accuracy {:.4}", r.turn, r.identity, r.accuracy);
        }
        s
    }
}

/// Scores one edit per example. Example `i` is sampled with seed
/// `seed + i`, so results do not depend on the thread count.
pub fn evaluate_edits(model: &dyn EditModel, examples: &[EditExample], use_context: bool, seed: u64) -> Result<EvalReport> {
    let scores = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let ctx = ex.context_image();
            let out = model.edit(use_context.then_some(&ctx), &ex.tokens, seed.wrapping_add(i as u64))?;
            Ok((ex.category, score_edit(&out, &ex.target_spec, &ex.touched())))
        })
        .collect::<Result<Vec<_>>>()?;
    let categories = Category::ALL
        .iter()
        .filter_map(|&cat| {
            let hits: Vec<_> = scores.iter().filter(|(c, _)| *c == cat).map(|(_, s)| s).collect();
            (!hits.is_empty()).then(|| {
                let n = hits.len() as f64;
                CategoryScore {
                    category: cat,
                    n: hits.len(),
                    accuracy: hits.iter().map(|s| s.accuracy).sum::<f64>() / n,
                    identity: hits.iter().map(|s| s.identity).sum::<f64>() / n,
                }
            })
        })
        .collect();
    Ok(EvalReport { categories, drift: Vec::new() })
}

/// Runs every script as a chained edit loop and reports, per turn, the mean
/// identity of the sprites the script never touches (scored against the
/// turn-0 scene) and the mean exact-match accuracy against the oracle chain.
///
/// With `use_context = false` each turn is generated from the instruction
/// alone, which gives the context-free baseline.
pub fn drift_eval(
    model: &dyn EditModel,
    scripts: &[DriftScript],
    use_context: bool,
    rule: MoveRule,
    seed: u64,
) -> Result<EvalReport> {
    let turns = scripts.first().map_or(0, |s| s.edits.len());
    if turns < 2 {
        return Err(Error::Config("drift evaluation needs scripts of at least 2 turns".into()));
    }
    if scripts.iter().any(|s| s.edits.len() != turns) {
        return Err(Error::Config("drift scripts differ in length".into()));
    }
    let per_script = scripts
        .par_iter()
        .enumerate()
        .map(|(si, script)| {
            let touched: Vec<SpriteId> = script.edits.iter().flat_map(|e| e.touched(&script.scene)).collect();
            let mut expected = script.scene.clone();
            let mut image = render(&expected);
            let mut rows = Vec::with_capacity(turns);
            for (k, edit) in script.edits.iter().enumerate() {
                let tokens = edit.tokens(&expected)?;
                expected = oracle(&expected, edit, rule)?;
                let turn_seed = seed.wrapping_add((si * turns + k) as u64);
                image = model.edit(use_context.then_some(&image), &tokens, turn_seed)?;
                let parsed = parse(&image, expected.grid);
                let identity = identity_score(&parsed, &script.scene, &touched);
                let accuracy = score_edit(&image, &expected, &touched).accuracy;
                rows.push((identity, accuracy));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scripts.len() as f64;
    let drift = (0..turns)
        .map(|k| DriftRow {
            turn: k + 1,
            identity: per_script.iter().map(|r| r[k].0).sum::<f64>() / n,
            accuracy: per_script.iter().map(|r| r[k].1).sum::<f64>() / n,
        })
        .collect();
    Ok(EvalReport { categories: Vec::new(), drift })
}
