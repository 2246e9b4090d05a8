//! Miniature two-stage detector: backbone feature pyramid, RPN, ROI pooling,
//! detection heads, losses, and inference.

mod anchors;
mod boxes;
mod infer;
mod loss;
mod model;

pub use anchors::{
    anchor_grid, assign_anchors, delta_flat_index, propose, Anchor, AnchorLabel, Proposal,
    ANCHOR_SIDES, FEAT_STRIDE, FINAL_GRID, NUM_ANCHORS, POST_NMS_TOP, PRE_NMS_TOP,
    PROPOSAL_NMS_IOU,
};
pub use boxes::{decode_delta, encode_delta, iou, nms, BoxF};
pub use infer::{Detection, Detector, INFER_NMS_IOU, SCORE_THRESHOLD};
pub use loss::{
    detection_loss, DetectionLoss, DetectionLossDetails, RoiDetail, BACKGROUND_CLASS, ROI_FG_IOU,
    ROI_SAMPLE, ROI_STRIDE, RPN_POS_CAP, RPN_SAMPLE,
};
pub use model::{
    Backbone, FeaturePyramid, HeadOut, RoiHead, Rpn, RpnOut, BACKBONE_CHANNELS, NUM_LEVELS,
    ROI_FEATURE_LEN, ROI_POOL_SIZE,
};
