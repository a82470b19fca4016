//! Newline-delimited JSON messages exchanged with a detector plugin over its
//! standard input and output. One object per line, UTF-8.

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HostMessage {
    Hello {
        protocol_version: u32,
        detector_id: String,
    },
    AnalyzeFrame {
        frame_path: String,
        frame_index: u32,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PluginMessage {
    HelloAck {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        protocol_version: Option<u32>,
    },
    FrameScore(FrameScore),
    /// A plugin-side failure for one frame.
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame_index: Option<u32>,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardLabel {
    Real,
    Fake,
}

impl HardLabel {
    /// Fake iff the soft label falls below the threshold.
    pub fn from_soft(soft_label: f64, threshold: f64) -> Self {
        if soft_label < threshold {
            HardLabel::Fake
        } else {
            HardLabel::Real
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HardLabel::Real => "real",
            HardLabel::Fake => "fake",
        }
    }
}

/// One frame's verdict. Lower soft labels mean "more likely forged". Frames
/// without a face conventionally score 1.0 / real.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_index: u32,
    pub soft_label: f64,
    pub hard_label: HardLabel,
    pub face_found: bool,
}

impl FrameScore {
    pub fn in_range(&self) -> bool {
        self.soft_label.is_finite() && (0.0..=1.0).contains(&self.soft_label)
    }
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    let mut line = serde_json::to_string(msg).expect("wire messages serialize");
    line.push('\n');
    line
}
