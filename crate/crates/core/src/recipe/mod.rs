//! Preprocessing recipe for the vehicle-level design table.
//!
//! A [`RecipeSpec`] describes the steps; fitting it on training rows gives a
//! [`Recipe`] whose frozen statistics are applied unchanged to any later
//! rows. Steps run in this order: rare-category pooling, target encoding,
//! bagged-tree imputation of one column, Yeo-Johnson per column, z-score
//! per column.

pub mod encode;
pub mod power;
pub mod tree;

use log::warn;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{is_degenerate, mean_std};

pub use encode::{
    fit_target_encoder, pool_rare_categories, CategoryPool, TargetEncoder, DEFAULT_CLAMP,
    DEFAULT_POOL_THRESHOLD, OTHER,
};
pub use power::{apply_yeo_johnson, fit_yeo_johnson};
pub use tree::{fit_bagged_imputer, BaggedImputer, ImputerParams, RegressionTree, TreeParams};

pub const RECIPE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    /// `NaN` marks a missing value.
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => {
                Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

/// Named columns of equal length, numeric or categorical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    names: Vec<String>,
    columns: Vec<Column>,
    rows: usize,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::arg(format!("duplicate column `{name}`")));
        }
        if !self.columns.is_empty() && column.len() != self.rows {
            return Err(Error::Dimension {
                expected: self.rows,
                got: column.len(),
            });
        }
        self.rows = column.len();
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    pub fn push_numeric(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        self.push(name, Column::Numeric(values))
    }

    pub fn push_categorical(&mut self, name: impl Into<String>, values: Vec<String>) -> Result<()> {
        self.push(name, Column::Categorical(values))
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.position(name).map(|j| &self.columns[j])
    }

    pub fn column_mut(&mut self, name: &str) -> Option<&mut Column> {
        self.position(name).map(|j| &mut self.columns[j])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureTable {
        FeatureTable {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            rows: rows.len(),
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select_columns<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureTable> {
        let mut out = FeatureTable::new();
        for n in names {
            let n = n.as_ref();
            let col = self
                .column(n)
                .ok_or_else(|| Error::arg(format!("no column named `{n}`")))?;
            out.push(n, col.clone())?;
        }
        if out.columns.is_empty() {
            out.rows = self.rows;
        }
        Ok(out)
    }
}

/// Which column to impute, and from which others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeSpec {
    pub target: String,
    pub predictors: Vec<String>,
    pub params: ImputerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeSpec {
    pub pool_threshold: f64,
    pub clamp: f64,
    pub impute: Option<ImputeSpec>,
    pub yeo_johnson: bool,
    pub seed: u64,
}

impl Default for RecipeSpec {
    fn default() -> Self {
        RecipeSpec {
            pool_threshold: DEFAULT_POOL_THRESHOLD,
            clamp: DEFAULT_CLAMP,
            impute: None,
            yeo_johnson: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStep {
    pub pool: CategoryPool,
    pub encoder: TargetEncoder,
}

/// Fitted per-column statistics, in output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStep {
    pub name: String,
    pub categorical: Option<CategoricalStep>,
    pub lambda: f64,
    pub center: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedImputer {
    pub target: usize,
    pub predictors: Vec<usize>,
    pub committee: BaggedImputer,
}

/// A fitted recipe. Only [`RecipeSpec::fit`] creates one, so every recipe
/// that can be applied has been fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub version: u32,
    pub spec: RecipeSpec,
    pub steps: Vec<ColumnStep>,
    pub imputer: Option<FittedImputer>,
}

impl RecipeSpec {
    pub fn fit(&self, table: &FeatureTable, y: &[u8]) -> Result<Recipe> {
        if y.len() != table.nrows() {
            return Err(Error::Dimension {
                expected: table.nrows(),
                got: y.len(),
            });
        }
        if table.nrows() < 3 {
            return Err(Error::arg("recipe needs at least 3 training rows"));
        }
        let mut steps = Vec::with_capacity(table.ncols());
        for (name, col) in table.names.iter().zip(&table.columns) {
            let categorical = match col {
                Column::Categorical(v) => {
                    let pool = CategoryPool::fit(v, self.pool_threshold)?;
                    let pooled = pool.apply(v);
                    let encoder = TargetEncoder::fit(&pooled, y, self.clamp)?;
                    Some(CategoricalStep { pool, encoder })
                }
                Column::Numeric(_) => None,
            };
            steps.push(ColumnStep {
                name: name.clone(),
                categorical,
                lambda: 1.0,
                center: 0.0,
                scale: 1.0,
            });
        }
        let mut recipe = Recipe {
            version: RECIPE_FORMAT_VERSION,
            spec: self.clone(),
            steps,
            imputer: None,
        };

        let mut m = recipe.encode(table)?;
        if let Some(imp) = &self.impute {
            let target = table.position(&imp.target).ok_or_else(|| {
                Error::arg(format!(
                    "imputation target `{}` is not a column",
                    imp.target
                ))
            })?;
            let predictors = imp
                .predictors
                .iter()
                .map(|p| {
                    table
                        .position(p)
                        .filter(|&j| j != target)
                        .ok_or_else(|| Error::arg(format!("bad imputation predictor `{p}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let complete: Vec<usize> = (0..m.nrows())
                .filter(|&i| {
                    m[[i, target]].is_finite() && predictors.iter().all(|&j| m[[i, j]].is_finite())
                })
                .collect();
            let x = Array2::from_shape_fn((complete.len(), predictors.len()), |(r, c)| {
                m[[complete[r], predictors[c]]]
            });
            let yv: Vec<f64> = complete.iter().map(|&i| m[[i, target]]).collect();
            let committee = BaggedImputer::fit(x.view(), &yv, imp.params, self.seed)?;
            recipe.imputer = Some(FittedImputer {
                target,
                predictors,
                committee,
            });
            recipe.impute(&mut m)?;
        }
        recipe.check_complete(&m)?;

        for (j, step) in recipe.steps.iter_mut().enumerate() {
            let col: Vec<f64> = m.column(j).to_vec();
            step.lambda = if self.yeo_johnson {
                fit_yeo_johnson(&col)?
            } else {
                1.0
            };
            let t: Vec<f64> = col
                .iter()
                .map(|&v| apply_yeo_johnson(v, step.lambda))
                .collect();
            let (mean, std) = mean_std(t.iter());
            step.center = mean;
            step.scale = if is_degenerate(mean, std) {
                warn!(
                    "column `{}` is constant after transformation; centering only",
                    step.name
                );
                1.0
            } else {
                std
            };
        }
        Ok(recipe)
    }

    /// Fits, then applies the fitted recipe to the same rows.
    pub fn fit_transform(&self, table: &FeatureTable, y: &[u8]) -> Result<(Recipe, Array2<f64>)> {
        let recipe = self.fit(table, y)?;
        let m = recipe.apply(table)?;
        Ok((recipe, m))
    }
}

impl Recipe {
    pub fn names(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.name.as_str()).collect()
    }

    fn encode(&self, table: &FeatureTable) -> Result<Array2<f64>> {
        let same = table.names.len() == self.steps.len()
            && table
                .names
                .iter()
                .zip(&self.steps)
                .all(|(a, b)| *a == b.name);
        if !same {
            return Err(Error::Validation(format!(
                "table columns [{}] do not match the recipe's [{}]",
                table.names.join(","),
                self.names().join(",")
            )));
        }
        let mut m = Array2::zeros((table.nrows(), self.steps.len()));
        for (j, (col, step)) in table.columns.iter().zip(&self.steps).enumerate() {
            match (col, &step.categorical) {
                (Column::Numeric(v), None) => {
                    for (i, &x) in v.iter().enumerate() {
                        m[[i, j]] = x;
                    }
                }
                (Column::Categorical(v), Some(cat)) => {
                    for (i, label) in v.iter().enumerate() {
                        m[[i, j]] = cat.encoder.encode(cat.pool.pool(label));
                    }
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "column `{}` changed kind since the recipe was fitted",
                        step.name
                    )))
                }
            }
        }
        Ok(m)
    }

    fn impute(&self, m: &mut Array2<f64>) -> Result<()> {
        let Some(imp) = &self.imputer else {
            return Ok(());
        };
        for i in 0..m.nrows() {
            if m[[i, imp.target]].is_finite() {
                continue;
            }
            let row: Array1<f64> = imp.predictors.iter().map(|&j| m[[i, j]]).collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "row {i}: cannot impute `{}` from missing predictors",
                    self.steps[imp.target].name
                )));
            }
            m[[i, imp.target]] = imp.committee.predict(row.view())?;
        }
        Ok(())
    }

    fn check_complete(&self, m: &Array2<f64>) -> Result<()> {
        for ((i, j), v) in m.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "row {i}: column `{}` is missing or not finite",
                    self.steps[j].name
                )));
            }
        }
        Ok(())
    }

    /// Transforms `table` with the frozen statistics into a numeric matrix
    /// with one column per recipe column.
    pub fn apply(&self, table: &FeatureTable) -> Result<Array2<f64>> {
        let mut m = self.encode(table)?;
        self.impute(&mut m)?;
        self.check_complete(&m)?;
        for (j, step) in self.steps.iter().enumerate() {
            m.column_mut(j)
                .mapv_inplace(|v| (apply_yeo_johnson(v, step.lambda) - step.center) / step.scale);
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Recipe = serde_json::from_str(s)?;
        if r.version != RECIPE_FORMAT_VERSION {
            return Err(Error::Version {
                expected: RECIPE_FORMAT_VERSION,
                found: r.version,
            });
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_table(n: usize, seed: u64) -> (FeatureTable, Vec<u8>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let annual: Vec<f64> = (0..n)
            .map(|_| rng.random_range(2_000.0..40_000.0))
            .collect();
        let commute: Vec<f64> = annual
            .iter()
            .map(|a| {
                if rng.random::<f64>() < 0.2 {
                    f64::NAN
                } else {
                    a * 0.01 + rng.random::<f64>()
                }
            })
            .collect();
        let colors = ["red", "blue", "green", "teal"];
        let color: Vec<String> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                colors[if u < 0.5 {
                    0
                } else if u < 0.8 {
                    1
                } else if u < 0.97 {
                    2
                } else {
                    3
                }]
                .to_string()
            })
            .collect();
        let y: Vec<u8> = (0..n)
            .map(|i| (rng.random::<f64>() < if color[i] == "red" { 0.3 } else { 0.1 }) as u8)
            .collect();
        let mut t = FeatureTable::new();
        t.push_numeric("annual", annual).unwrap();
        t.push_numeric("commute", commute).unwrap();
        t.push_categorical("color", color).unwrap();
        (t, y)
    }

    fn spec() -> RecipeSpec {
        RecipeSpec {
            impute: Some(ImputeSpec {
                target: "commute".into(),
                predictors: vec!["annual".into(), "color".into()],
                params: ImputerParams::default(),
            }),
            ..RecipeSpec::default()
        }
    }

    #[test]
    fn training_output_is_standardized() {
        let (t, y) = sample_table(500, 1);
        let (_, m) = spec().fit_transform(&t, &y).unwrap();
        for col in m.columns() {
            let (mean, std) = mean_std(col.iter());
            assert!(
                mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9,
                "{mean} {std}"
            );
        }
    }

    #[test]
    fn reapplying_reproduces_fit_output() {
        let (t, y) = sample_table(300, 2);
        let (recipe, m) = spec().fit_transform(&t, &y).unwrap();
        assert_eq!(recipe.apply(&t).unwrap(), m);
        let back = Recipe::from_json(&recipe.to_json().unwrap()).unwrap();
        assert_eq!(back, recipe);
        assert_eq!(back.apply(&t).unwrap(), m);
    }

    #[test]
    fn held_out_rows_use_training_statistics() {
        let (t, y) = sample_table(400, 3);
        let train: Vec<usize> = (0..300).collect();
        let test: Vec<usize> = (300..400).collect();
        let recipe = spec().fit(&t.select_rows(&train), &y[..300]).unwrap();
        let m = recipe.apply(&t.select_rows(&test)).unwrap();
        assert!(m.iter().all(|v| v.is_finite()));
        let means: Vec<f64> = m.columns().into_iter().map(|c| c.mean().unwrap()).collect();
        assert!(means.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn rare_and_unseen_categories_share_the_pooled_code() {
        let (t, y) = sample_table(400, 4);
        let recipe = spec().fit(&t, &y).unwrap();
        let cat = recipe.steps[2].categorical.as_ref().unwrap();
        assert!(!cat.pool.kept.contains("teal"));
        assert_eq!(
            cat.encoder.encode(cat.pool.pool("teal")),
            cat.encoder.encode(cat.pool.pool("mauve"))
        );
    }

    #[test]
    fn mismatched_table_is_rejected() {
        let (t, y) = sample_table(100, 5);
        let recipe = RecipeSpec::default()
            .fit(&t.select_columns(&["annual", "color"]).unwrap(), &y)
            .unwrap();
        assert!(matches!(recipe.apply(&t), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_values_without_imputation_are_rejected() {
        let (t, y) = sample_table(100, 6);
        assert!(matches!(
            RecipeSpec::default().fit(&t, &y),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn too_few_complete_rows_for_imputation() {
        let (mut t, y) = sample_table(60, 7);
        if let Some(Column::Numeric(v)) = t.column_mut("commute") {
            for x in v.iter_mut().skip(20) {
                *x = f64::NAN;
            }
        }
        assert!(spec().fit(&t, &y).is_err());
    }

    #[test]
    fn constant_column_is_centered_only() {
        let mut t = FeatureTable::new();
        t.push_numeric("flat", vec![3.0; 10]).unwrap();
        t.push_numeric("x", (0..10).map(|i| i as f64).collect())
            .unwrap();
        let (_, m) = RecipeSpec::default()
            .fit_transform(&t, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1])
            .unwrap();
        assert!(m.column(0).iter().all(|&v| v == 0.0));
    }
}
