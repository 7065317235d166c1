use super::{Scene, SceneError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionLabel {
    Background,
    /// Inside exactly one box.
    Single(usize),
    /// Inside two or more boxes; candidates sorted ascending.
    Overlap(Vec<usize>),
}

/// Split of a scene's points by how many instance boxes contain them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub labels: Vec<RegionLabel>,
    pub num_instances: usize,
    /// Global indices of single-box points, ascending.
    pub single: Vec<usize>,
    /// Owning box of each entry of `single`.
    pub single_instance: Vec<usize>,
    /// Global indices of overlap points, ascending.
    pub overlap: Vec<usize>,
    /// Candidate boxes of each entry of `overlap`.
    pub candidates: Vec<Vec<usize>>,
    pub background: Vec<usize>,
}

impl RegionPartition {
    pub fn num_points(&self) -> usize {
        self.labels.len()
    }

    pub fn num_single(&self) -> usize {
        self.single.len()
    }

    pub fn num_overlap(&self) -> usize {
        self.overlap.len()
    }

    pub fn num_background(&self) -> usize {
        self.background.len()
    }

    /// Binary `N_l x K` box-membership matrix of single-box points.
    pub fn m_l(&self) -> Vec<Vec<u8>> {
        self.single_instance
            .iter()
            .map(|&k| {
                let mut row = vec![0u8; self.num_instances];
                row[k] = 1;
                row
            })
            .collect()
    }

    /// Per instance, a mask over all `N` points marking its single-box points.
    pub fn single_masks(&self) -> Vec<Vec<bool>> {
        let mut masks = vec![vec![false; self.num_points()]; self.num_instances];
        for (&j, &k) in self.single.iter().zip(&self.single_instance) {
            masks[k][j] = true;
        }
        masks
    }

    /// Whether point `j` is inside box `k`.
    pub fn in_box(&self, j: usize, k: usize) -> bool {
        match &self.labels[j] {
            RegionLabel::Background => false,
            RegionLabel::Single(i) => *i == k,
            RegionLabel::Overlap(c) => c.contains(&k),
        }
    }
}

pub fn partition_regions(scene: &Scene) -> RegionPartition {
    let mut partition = RegionPartition {
        labels: Vec::with_capacity(scene.num_points()),
        num_instances: scene.num_instances(),
        single: Vec::new(),
        single_instance: Vec::new(),
        overlap: Vec::new(),
        candidates: Vec::new(),
        background: Vec::new(),
    };
    for (j, p) in scene.points.iter().enumerate() {
        let inside: Vec<usize> = scene
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.contains(p))
            .map(|(k, _)| k)
            .collect();
        let label = match inside.len() {
            0 => {
                partition.background.push(j);
                RegionLabel::Background
            }
            1 => {
                partition.single.push(j);
                partition.single_instance.push(inside[0]);
                RegionLabel::Single(inside[0])
            }
            _ => {
                partition.overlap.push(j);
                partition.candidates.push(inside.clone());
                RegionLabel::Overlap(inside)
            }
        };
        partition.labels.push(label);
    }
    partition
}

/// True instance of every overlap point, in `partition.overlap` order.
pub fn macc_oracle(partition: &RegionPartition, scene: &Scene) -> Result<Vec<usize>, SceneError> {
    partition
        .overlap
        .iter()
        .zip(&partition.candidates)
        .map(|(&j, cands)| match scene.gt_instance[j] {
            Some(k) if cands.contains(&k) => Ok(k),
            other => Err(SceneError::OracleMismatch {
                point: j,
                instance: other.map_or(usize::MAX, |k| k),
                candidates: cands.clone(),
            }),
        })
        .collect()
}
