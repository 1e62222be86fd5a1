/// Input stream of a forward pass through the shared encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertGroupKind {
    Rgb,
    Depth,
    Fusion,
}

impl ExpertGroupKind {
    pub const ALL: [ExpertGroupKind; 3] = [ExpertGroupKind::Rgb, ExpertGroupKind::Depth, ExpertGroupKind::Fusion];

    pub fn index(self) -> usize {
        match self {
            ExpertGroupKind::Rgb => 0,
            ExpertGroupKind::Depth => 1,
            ExpertGroupKind::Fusion => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertGroupKind::Rgb => "rgb",
            ExpertGroupKind::Depth => "depth",
            ExpertGroupKind::Fusion => "fusion",
        }
    }
}

/// Routing table from input modality to the two active expert groups.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModalityDispatcher;

impl ModalityDispatcher {
    pub fn route(self, modality: Modality) -> [ExpertGroupKind; 2] {
        match modality {
            Modality::Rgb => [ExpertGroupKind::Rgb, ExpertGroupKind::Fusion],
            Modality::Depth => [ExpertGroupKind::Depth, ExpertGroupKind::Fusion],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_table() {
        let d = ModalityDispatcher;
        assert_eq!(d.route(Modality::Rgb), [ExpertGroupKind::Rgb, ExpertGroupKind::Fusion]);
        assert_eq!(d.route(Modality::Depth), [ExpertGroupKind::Depth, ExpertGroupKind::Fusion]);
    }
}
