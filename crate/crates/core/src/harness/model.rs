//! The full model and one differentiable pass over a batch.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::encoders::{
    entity_encode, memory_rows, text_encode, vision_encode, EntityParams, PatchSequence, TextParams,
    TokenSequence, VisionParams,
};
use crate::error::{Error, Result};
use crate::fusion::{assemble, fuse, heads, FusionParams};
use crate::gnn::{gnn_encode, GnnLayerParams, RelationTable};
use crate::kg::{expand_subgraph, split_triplets, Direction, KnowledgeGraph, Subgraph, Triplet};
use crate::objectives::{
    draw_negatives, linkpred_from_scores, mask_patches, mask_spans, total_loss, ItcParams, LossBundle, PatchMasking,
    ScoringTables, TokenMasking,
};
use crate::params::{BoundParams, ParamStore};
use crate::retriever::{relevance_weights_var, retrieve_from_scores, score_patches_var, RetrievedEntitySet};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

use super::config::Config;
use super::corpus::{SyntheticCorpus, MASK};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub vision: VisionParams,
    pub text: TextParams,
    pub entity: EntityParams,
    pub relations: RelationTable,
    pub gnn: Vec<GnnLayerParams>,
    pub fusion: FusionParams,
    pub itc: ItcParams,
}

impl Model {
    /// Seeded initialisation; the relation table is built from `kg`.
    pub fn init(config: &Config, kg: &KnowledgeGraph) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = rng_from(derive_seed(c.seed, stream::INIT, 0));
        let mut store = ParamStore::new();
        let vision = VisionParams::init(
            &mut store,
            c.patch_dim(),
            c.patches(),
            c.width,
            c.memory_width,
            c.vision_depth,
            c.heads,
            &mut rng,
        )?;
        let text = TextParams::init(&mut store, c.vocab, c.max_caption + 1, c.width, c.text_depth, c.heads, &mut rng)?;
        let entity = EntityParams::init(&mut store, c.memory_width, c.width, &mut rng)?;
        let relations = RelationTable::init(&mut store, kg, c.memory_width, c.width, c.seed)?;
        let gnn = (0..c.gnn_depth)
            .map(|l| GnnLayerParams::init(&mut store, &format!("gnn.layer{l}"), c.width, c.attn_width, &mut rng))
            .collect::<Result<_>>()?;
        let fusion = FusionParams::init(&mut store, c.width, c.fusion_depth, c.heads, c.vocab, c.patch_dim(), &mut rng)?;
        let itc = ItcParams::init(&mut store, c.width, c.tau_init, &mut rng)?;
        Ok(Self {
            config: c.clone(),
            store,
            vision,
            text,
            entity,
            relations,
            gnn,
            fusion,
            itc,
        })
    }

    /// Retrieval queries for an unmasked image, `N × d_e`.
    pub fn queries(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let seq = PatchSequence {
            patches: patches.clone(),
        };
        let (_, q) = vision_encode(&mut g, &bound, &self.vision, &seq, &[])?;
        Ok(g.value(q).clone())
    }

    /// Context-free entity vectors (memory row times the entity projection),
    /// one row per memory entry.
    pub fn entity_table(&self, corpus: &SyntheticCorpus) -> Result<Tensor> {
        let rows = memory_rows(&corpus.memory, corpus.memory.ids())?;
        let mut g = Graph::new();
        let m = g.constant(rows);
        let p = g.constant(self.store.get(self.entity.proj).clone());
        let t = g.matmul(m, p)?;
        Ok(g.value(t).clone())
    }

    /// Outgoing relation rows, in relation id order.
    pub fn relation_table(&self, kg: &KnowledgeGraph) -> Result<Tensor> {
        let table = self.store.get(self.relations.param);
        let rows = kg
            .relation_ids()
            .into_iter()
            .map(|r| Ok(table.row_slice(self.relations.row(r, Direction::Outgoing)?).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Every discrete choice made for one example during a pass. Replaying a
/// plan makes the pass a smooth function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamplePlan {
    pub example: usize,
    pub masked_tokens: Vec<usize>,
    pub token_mask: TokenMasking,
    pub patch_mask: PatchMasking,
    pub retrieved: RetrievedEntitySet,
    /// Message-passing subgraph, held-out edges removed.
    pub subgraph: Subgraph,
    pub held_out: Vec<Triplet>,
    pub negatives: Vec<Triplet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub examples: Vec<ExamplePlan>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[mlm, mvm, linkpred, itc]`, each `1 × 1`.
    pub components: [Var; 4],
    pub total: Var,
    pub bundle: LossBundle,
    pub plan: StepPlan,
}

fn plan_example(
    model: &Model,
    corpus: &SyntheticCorpus,
    example: usize,
    seed: u64,
    scores: &Tensor,
    token_mask: (Vec<usize>, TokenMasking),
    patch_mask: PatchMasking,
) -> Result<ExamplePlan> {
    let c = &model.config;
    let retrieved = retrieve_from_scores(scores, corpus.memory.ids(), c.k_per_patch, c.k_final)?;
    let full = expand_subgraph(
        &corpus.kg,
        &retrieved.ids(),
        c.per_node_cap,
        derive_seed(seed, stream::SUBGRAPH, 0),
    )?;
    let (_, held_out) = split_triplets(&full.triplets(), c.edge_drop, derive_seed(seed, stream::HOLDOUT, 0))?;
    let subgraph = full.without(&held_out);
    let negatives = draw_negatives(&corpus.kg, &held_out, c.negatives, seed)?;
    Ok(ExamplePlan {
        example,
        masked_tokens: token_mask.0,
        token_mask: token_mask.1,
        patch_mask,
        retrieved,
        subgraph,
        held_out,
        negatives,
    })
}

/// One pass over `batch`. With `plan = None`, masks, retrieval, subgraphs,
/// held-out edges and negatives are drawn under `seed` (example `b` of the
/// batch uses `derive_seed(seed, EXAMPLE, b)`) and returned; otherwise the
/// given plan is replayed.
pub fn forward(
    g: &mut Graph,
    bound: &BoundParams,
    model: &Model,
    corpus: &SyntheticCorpus,
    batch: &[usize],
    seed: u64,
    plan: Option<&StepPlan>,
) -> Result<StepOutput> {
    let c = &model.config;
    if let Some(p) = plan {
        if p.examples.len() != batch.len() {
            return Err(Error::invalid("plan does not match the batch"));
        }
    }
    let memory = g.constant(corpus.memory.matrix().clone());
    let all_entities = g.matmul(memory, bound[model.entity.proj])?;
    let memory_row: HashMap<u64, usize> = corpus.memory.ids().iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let relation_row: HashMap<u64, usize> = corpus
        .kg
        .relation_ids()
        .into_iter()
        .map(|r| Ok((r, model.relations.row(r, Direction::Outgoing)?)))
        .collect::<Result<_>>()?;

    let mut plans = Vec::with_capacity(batch.len());
    let (mut logits, mut targets) = (Vec::new(), Vec::new());
    let (mut preds, mut patch_targets) = (Vec::new(), Vec::new());
    let (mut images, mut texts) = (Vec::new(), Vec::new());
    let (mut pos, mut neg) = (Vec::new(), Vec::new());

    for (b, &ex) in batch.iter().enumerate() {
        let example = corpus
            .examples
            .get(ex)
            .ok_or_else(|| Error::invalid(format!("example {ex} out of range")))?;
        let es = derive_seed(seed, stream::EXAMPLE, b as u64);
        let seq = PatchSequence::from_image(&example.image, c.patch)?;
        let cached = plan.map(|p| &p.examples[b]);
        let (tok_mask, patch_mask) = match cached {
            Some(p) => ((p.masked_tokens.clone(), p.token_mask.clone()), p.patch_mask.clone()),
            None => (
                mask_spans(
                    &example.tokens,
                    c.mlm_rate,
                    c.mean_span,
                    c.max_span,
                    MASK,
                    derive_seed(es, stream::TOKEN_MASK, 0),
                )?,
                mask_patches(&seq, c.mvm_rate, derive_seed(es, stream::PATCH_MASK, 0))?,
            ),
        };
        let (vision_out, queries) = vision_encode(g, bound, &model.vision, &seq, &patch_mask.positions)?;
        let scores = score_patches_var(g, queries, memory)?;
        let ep = match cached {
            Some(p) => p.clone(),
            None => plan_example(model, corpus, ex, es, g.value(scores), tok_mask, patch_mask)?,
        };

        // seeds carry their relevance weight, sampled neighbours 1/#seeds
        let at: Vec<(usize, usize)> = ep.retrieved.entries.iter().map(|e| (e.patch, e.column)).collect();
        let picked = g.gather_elems(scores, &at)?;
        let mut weights = relevance_weights_var(g, picked, c.relevance_temperature)?;
        let extra = ep.subgraph.len() - ep.retrieved.len();
        if extra > 0 {
            let fill = g.constant(Tensor::full(&[extra, 1], 1.0 / ep.retrieved.len() as f64));
            weights = g.concat_rows(&[weights, fill])?;
        }
        let e0 = entity_encode(g, bound, &model.entity, &corpus.memory, ep.subgraph.nodes(), weights)?;
        let nodes = gnn_encode(g, bound, &ep.subgraph, &model.relations, e0, &model.gnn)?;

        let text_out = text_encode(
            g,
            bound,
            &model.text,
            &TokenSequence {
                tokens: ep.masked_tokens.clone(),
            },
        )?;
        let fused = assemble(g, bound, vision_out, text_out, Some(nodes), &model.fusion)?;
        let hidden = fuse(g, bound, &fused, &model.fusion)?;
        let out = heads(
            g,
            bound,
            hidden,
            &fused,
            &model.fusion,
            &ep.token_mask.positions,
            &ep.patch_mask.positions,
        )?;
        if let Some(l) = out.mlm_logits {
            logits.push(l);
            targets.extend_from_slice(&ep.token_mask.originals);
        }
        if let Some(p) = out.mvm_pred {
            preds.push(p);
            patch_targets.push(ep.patch_mask.targets.clone());
        }
        images.push(g.mean_rows(vision_out)?);
        texts.push(g.slice_rows(text_out, 0, 1)?);

        if !ep.held_out.is_empty() {
            let resident: Vec<usize> = ep.subgraph.nodes().iter().map(|id| memory_row[id]).collect();
            let table = g.scatter_rows(all_entities, nodes, &resident)?;
            let tables = ScoringTables {
                entities: table,
                relations: bound[model.relations.param],
                entity_row: memory_row.clone(),
                relation_row: relation_row.clone(),
                margin: c.margin,
                negatives: c.negatives,
            };
            pos.push(tables.score(g, &ep.held_out)?);
            neg.push(tables.score(g, &ep.negatives)?);
        }
        plans.push(ep);
    }

    let mlm = if logits.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let l = g.concat_rows(&logits)?;
        g.cross_entropy(l, &targets)?
    };
    let mvm = if preds.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let p = g.concat_rows(&preds)?;
        let rows: Vec<Vec<f64>> = patch_targets
            .iter()
            .flat_map(|t| (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect::<Vec<_>>())
            .collect();
        g.mse(p, &Tensor::from_rows(&rows)?)?
    };
    let linkpred = if pos.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let p = g.concat_rows(&pos)?;
        let n = g.concat_rows(&neg)?;
        linkpred_from_scores(g, p, n, c.margin)?
    };
    let img = g.concat_rows(&images)?;
    let txt = g.concat_rows(&texts)?;
    let itc = crate::objectives::itc_loss(g, bound, &model.itc, img, txt)?;
    let components = [mlm, mvm, linkpred, itc];
    let (total, bundle) = total_loss(g, components, c.weights)?;
    Ok(StepOutput {
        components,
        total,
        bundle,
        plan: StepPlan { examples: plans },
    })
}
