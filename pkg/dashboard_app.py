"""Streamlit front end: streamlit run dashboard_app.py"""
from pathlib import Path

import altair as alt
import numpy as np
import pandas as pd
import streamlit as st

from data_pipeline import (
    BucketGrid,
    CropConfig,
    bucket_manifest,
    candidate_regions,
    crop_verdict,
    max_interior_rectangle,
    synthetic_mask,
)
from errors import DForceError
from experiment import METRICS_FILE, load_report
from report_pdf import report_pdf_bytes
from schedule_core import ad_schedule, count_nondecreasing, count_unconstrained, plan_matrix

st.set_page_config(page_title="dforce", layout="wide")
st.markdown("## 🎞️ dforce: diffusion forcing toolkit")

tab_schedule, tab_plan, tab_crop, tab_bucket, tab_report = st.tabs(
    ["🔢 Schedules", "🗺️ AD plan", "✂️ Crop", "🪣 Buckets", "📄 Report"])

with tab_schedule:
    st.markdown("### Composition space size")
    col1, col2 = st.columns(2)
    with col1:
        F = st.number_input("Frames (F)", min_value=1, max_value=64, value=16, key="count_F")
    with col2:
        T = st.number_input("Timesteps (T)", min_value=1, max_value=2000, value=1000, key="count_T")
    total = count_unconstrained(int(F), int(T))
    constrained = count_nondecreasing(int(F), int(T))
    col1, col2, col3 = st.columns(3)
    col1.metric("Unconstrained (digits)", len(str(total)))
    col2.metric("Non-decreasing (digits)", len(str(constrained)))
    col3.metric("Orders saved", len(str(total)) - len(str(constrained)))
    with st.expander("Exact values"):
        st.code(f"T^F            = {total}\nC(F+T-1, F)    = {constrained}")

with tab_plan:
    st.markdown("### Adaptive Difference plan")
    col1, col2, col3 = st.columns(3)
    with col1:
        pF = st.number_input("Frames", min_value=1, max_value=16, value=4, key="plan_F")
    with col2:
        pT = st.number_input("Timesteps", min_value=1, max_value=50, value=10, key="plan_T")
    with col3:
        ps = st.number_input("s", min_value=0, max_value=50, value=1, key="plan_s")
    if ps > pT:
        st.warning("s must not exceed T.")
    else:
        matrix = plan_matrix(ad_schedule(int(pF), int(pT), int(ps)), include_initial=True)
        df_plan = pd.DataFrame(
            [(step, frame + 1, int(level)) for step, row in enumerate(matrix)
             for frame, level in enumerate(row)],
            columns=["step", "frame", "level"])
        chart = alt.Chart(df_plan).mark_rect().encode(
            x=alt.X("frame:O", title="Frame"),
            y=alt.Y("step:O", title="Step"),
            color=alt.Color("level:Q", scale=alt.Scale(scheme="blues"), title="Noise level"),
            tooltip=["step", "frame", "level"],
        )
        st.altair_chart(chart, use_container_width=True)
        st.caption(f"{len(matrix) - 1} steps")

with tab_crop:
    st.markdown("### Largest clean crop on a synthetic mask")
    col1, col2, col3 = st.columns(3)
    with col1:
        width = st.number_input("Width", min_value=8, max_value=640, value=160, key="crop_w")
    with col2:
        height = st.number_input("Height", min_value=8, max_value=640, value=90, key="crop_h")
    with col3:
        seed = st.number_input("Seed", min_value=0, value=0, key="crop_seed")
    area_threshold = st.slider("Area threshold", 0.5, 1.0, 0.8, 0.01)
    mask = synthetic_mask(int(width), int(height), np.random.default_rng(int(seed)))
    rect, area = max_interior_rectangle(mask)
    verdict = crop_verdict(rect, int(width), int(height), CropConfig(area_threshold=area_threshold))
    image = np.stack([mask * 255] * 3, axis=-1).astype(np.uint8)
    if not rect.degenerate:
        image[rect.top:rect.bottom + 1, rect.left:rect.right + 1, 0] = 120
    st.image(image, caption=f"Clean rectangle area {area}")
    if verdict["accepted"]:
        st.success("Crop accepted")
    else:
        st.error("Crop rejected: " + "; ".join(verdict["reasons"]))
    with st.expander("Candidate regions"):
        regions = candidate_regions(int(width), int(height))
        st.dataframe(pd.DataFrame(
            [{"kind": "subtitle", **r.as_dict()} for r in regions.subtitle]
            + [{"kind": "logo", **r.as_dict()} for r in regions.logo]))

with tab_bucket:
    st.markdown("### FPS normalisation and bucket assignment")
    grid = BucketGrid()
    uploaded = st.file_uploader("Manifest CSV (path, duration, width, height, fps)", type="csv")
    if uploaded is not None:
        manifest = pd.read_csv(uploaded)
    else:
        manifest = pd.DataFrame({
            "path": ["a.mp4", "b.mp4", "c.mp4", "d.mp4"],
            "duration": [3.0, 7.5, 12.0, 2.2],
            "width": [1920, 1080, 1280, 960],
            "height": [1080, 1920, 720, 960],
            "fps": [30, 24, 60, 25],
        })
        if st.checkbox("Add a row with a missing duration", key="bucket_bad_row"):
            manifest.loc[len(manifest)] = ["broken.mp4", np.nan, 640, 480, 30]
    skipped = []
    try:
        bucketed = bucket_manifest(manifest, grid, skipped)
    except DForceError as e:
        st.error(f"❌ {e}")
    else:
        for path, reason in skipped:
            st.warning(f"⚠️ Skipping **{path}**: {reason}")
        st.dataframe(bucketed[["path", "target_fps", "bucket_id", "capacity"]], use_container_width=True)

with tab_report:
    st.markdown("### Run report")
    run_dir = st.text_input("Run directory", value="")
    if not run_dir:
        st.info("Enter the output directory of a `cli.py run`.")
    elif not (Path(run_dir) / "report.json").exists():
        st.warning("No report.json in that directory.")
    else:
        report = load_report(run_dir)
        st.caption(f"config {report.config_hash[:12]} · seed {report.seed} · {report.wall_clock:.1f}s")
        st.dataframe(pd.DataFrame(
            [{"metric": k, "value": v["value"], "operation": v["operation"]}
             for k, v in sorted(report.final.items())]), use_container_width=True)
        metrics = pd.read_csv(Path(run_dir) / METRICS_FILE)
        series = metrics[metrics["step"] >= 0]
        if not series.empty:
            choice = st.selectbox("Series", sorted(series["metric"].unique()))
            chart = alt.Chart(series[series["metric"] == choice]).mark_line().encode(
                x=alt.X("step:Q", title="Step"), y=alt.Y("value:Q", title=choice))
            st.altair_chart(chart, use_container_width=True)
        st.download_button("📄 Download PDF", data=report_pdf_bytes(report),
                           file_name="report.pdf", mime="application/pdf")
