import datetime

import numpy as np
import pandas as pd
import pytest

from conftest import SIGHTINGS_CSV
from core.errors import ConfigError, ContractError, GridError, IngestError
from core.ingest import (
    ColumnMapping,
    CovariateOptions,
    PreparedData,
    assign_grid,
    build_confirmed_presence,
    categorize_list_length,
    derive_visits,
    load_site_covariates,
    observer_token,
    parse_sightings,
    prepare_dataset,
    read_text,
    scale_year,
    scale_years,
    split_observer_streams,
)
from core.records import GridSpec, ListLengthClass, Sighting, StudyWindow, week_of_year

HEADER = "observer,species,date,x,y,validated,countable\n"


def _sightings(rows: list[tuple]) -> pd.DataFrame:
    """rows: (observer, species, date, site, validated, countable)"""
    frame = pd.DataFrame(rows, columns=["observer", "species", "date", "site", "validated", "countable"])
    frame["date"] = pd.to_datetime(frame["date"]).dt.date
    frame["site_id"] = frame["site"]
    frame["year"] = [d.year for d in frame["date"]]
    frame["week"] = [week_of_year(d) for d in frame["date"]]
    return frame


class TestParseSightings:
    def test_valid_rows(self):
        text = HEADER + "o1,A,2020-06-01,10,20,0,1\no2,B,2020-06-02,30,40,1,0\n"
        result = parse_sightings(read_text(text), anonymise=False)
        assert len(result.sightings) == 2
        assert result.errors == []
        row = result.sightings.iloc[1]
        assert row["observer"] == "o2"
        assert bool(row["validated"]) is True
        assert bool(row["countable"]) is False
        assert row["week"] == week_of_year(datetime.date(2020, 6, 2))

    def test_invalid_calendar_date_is_row_error(self):
        result = parse_sightings(read_text(HEADER + "o1,A,2025-13-40,10,20,0,1\n"))
        assert len(result.sightings) == 0
        assert len(result.errors) == 1
        assert result.errors[0].line == 2
        assert result.errors[0].field == "date"

    def test_empty_body(self):
        result = parse_sightings(read_text(HEADER))
        assert result.sightings.empty
        assert result.errors == []

    def test_empty_file_names_source(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(IngestError) as info:
            parse_sightings(path, source=str(path))
        assert info.value.line == 1
        assert f"{path}:1" in str(info.value)
        with pytest.raises(IngestError):
            parse_sightings(read_text(""))

    def test_missing_column_is_fatal(self):
        with pytest.raises(IngestError) as info:
            parse_sightings(read_text("observer,species,date,x\no1,A,2020-06-01,1\n"), source="s.csv")
        assert info.value.line == 1
        assert "s.csv:1" in str(info.value)

    def test_optional_columns_default(self):
        schema = ColumnMapping(validated=None, countable=None, observer="who")
        text = "who,species,date,x,y\no1,A,2020-06-01,10,20\n"
        frame = parse_sightings(read_text(text), schema, anonymise=False).sightings
        assert frame["observer"].tolist() == ["o1"]
        assert not frame["validated"].any()
        assert frame["countable"].all()

    def test_non_finite_coordinate_rejected(self):
        result = parse_sightings(read_text(HEADER + "o1,A,2020-06-01,inf,20,0,1\n"))
        assert len(result.errors) == 1

    def test_anonymised_tokens_are_stable(self):
        text = HEADER + "o1,A,2020-06-01,10,20,0,1\no1,B,2020-06-01,10,20,0,1\n"
        frame = parse_sightings(read_text(text), salt="pepper").sightings
        assert frame["observer"].nunique() == 1
        assert frame["observer"].iloc[0] == observer_token("o1", "pepper")
        assert observer_token("o1", "pepper") != observer_token("o1", "salt")

    def test_window_from_context(self):
        window = StudyWindow(start=datetime.date(2020, 1, 1), end=datetime.date(2020, 12, 31))
        result = parse_sightings(read_text(HEADER + "o1,A,2019-06-01,10,20,0,1\n"), window=window)
        assert len(result.errors) == 1


class TestGrid:
    def test_cell_center(self, grid):
        x, y = grid.centroid(5 * 10 + 3)
        assert assign_grid((x, y), grid) == 53

    def test_boundary_goes_right(self, grid):
        assert assign_grid((1000.0, 500.0), grid) == 1

    def test_hand_computed(self, grid):
        assert assign_grid((2500.0, 500.0), grid) == 2

    def test_sighting_input(self, grid):
        s = Sighting(observer_id="o", species_id="A", date=datetime.date(2020, 1, 1), x=2500, y=1500)
        assert assign_grid(s, grid) == 12

    def test_outside(self, grid):
        with pytest.raises(GridError):
            assign_grid((-1.0, 10.0), grid)
        with pytest.raises(GridError):
            assign_grid((10.0, 10000.0), grid)


class TestVisits:
    def test_grouping(self):
        frame = _sightings(
            [("o", "A", "2020-06-01", 0, False, True), ("o", "B", "2020-06-01", 0, False, True), ("o", "C", "2020-06-01", 0, False, True)]
        )
        visits = derive_visits(frame, "A", {"o"})
        assert len(visits) == 1
        assert visits["ll_class"].iloc[0] == "L2_3"
        assert visits["y"].iloc[0] == 1
        assert visits["n_species"].iloc[0] == 3

    def test_site_in_group_key(self):
        frame = _sightings([("o", "A", "2020-06-01", 0, False, True), ("o", "A", "2020-06-01", 1, False, True)])
        assert len(derive_visits(frame, "A", {"o"})) == 2

    def test_dead_specimen_not_a_detection(self):
        rows = [("o", s, "2020-06-01", 0, False, True) for s in "BCDE"]
        rows.append(("o", "A", "2020-06-01", 0, False, False))
        visits = derive_visits(_sightings(rows), "A", {"o"})
        assert len(visits) == 1
        assert visits["ll_class"].iloc[0] == "L4plus"
        assert visits["y"].iloc[0] == 0

    def test_only_proficient(self):
        frame = _sightings([("o", "A", "2020-06-01", 0, False, True), ("n", "A", "2020-06-01", 0, False, True)])
        visits = derive_visits(frame, "A", {"o"})
        assert visits["observer"].tolist() == ["o"]

    def test_empty_proficient_set(self):
        with pytest.raises(ConfigError):
            derive_visits(_sightings([("o", "A", "2020-06-01", 0, False, True)]), "A", set())

    @pytest.mark.parametrize(
        "count, expected",
        [(1, ListLengthClass.L1), (2, ListLengthClass.L2_3), (3, ListLengthClass.L2_3), (4, ListLengthClass.L4PLUS), (40, ListLengthClass.L4PLUS)],
    )
    def test_list_length(self, count, expected):
        assert categorize_list_length(count) == expected

    def test_list_length_positive(self):
        with pytest.raises(ContractError):
            categorize_list_length(0)


class TestObserverStreams:
    def test_threshold_boundary(self):
        frame = pd.DataFrame({"observer": ["p"] * 500 + ["q"] * 499})
        proficient, other = split_observer_streams(frame, 500)
        assert proficient == {"p"}
        assert other == {"q"}

    def test_empty(self):
        assert split_observer_streams(pd.DataFrame({"observer": []}), 500) == (set(), set())

    def test_threshold_must_be_positive(self):
        with pytest.raises(ContractError):
            split_observer_streams(pd.DataFrame({"observer": ["p"]}), 0)


class TestConfirmedPresence:
    def test_visit_detection(self):
        frame = _sightings([("o", "A", "2020-06-01", 1, False, True)])
        visits = derive_visits(frame, "A", {"o"})
        presence = build_confirmed_presence(visits, frame, 3, [2020, 2021], "A", proficient={"o"})
        assert presence.a[1, 0] == 1
        assert presence.a.sum() == 1

    def test_validated_record_from_other_observer(self):
        frame = _sightings([("n", "A", "2021-06-01", 2, True, True), ("o", "B", "2021-06-01", 0, False, True)])
        visits = derive_visits(frame, "A", {"o"})
        presence = build_confirmed_presence(visits, frame, 3, [2020, 2021], "A", proficient={"o"})
        assert presence.a[2, 1] == 1
        assert presence.a.sum() == 1

    def test_unvalidated_other_observer_ignored(self):
        frame = _sightings([("n", "A", "2021-06-01", 2, False, True)])
        presence = build_confirmed_presence(frame.iloc[:0].assign(y=[]), frame, 3, [2020, 2021], "A", proficient={"o"})
        assert presence.a.sum() == 0

    def test_proficient_non_countable_counts_as_presence(self):
        frame = _sightings([("o", "A", "2020-06-01", 0, False, False)])
        visits = derive_visits(frame, "A", {"o"})
        assert visits["y"].tolist() == [0]
        kept = build_confirmed_presence(visits, frame, 3, [2020, 2021], "A", proficient={"o"}, any_stage=True)
        dropped = build_confirmed_presence(visits, frame, 3, [2020, 2021], "A", proficient={"o"}, any_stage=False)
        assert kept.a[0, 0] == 1
        assert dropped.a[0, 0] == 0

    def test_no_records(self):
        frame = _sightings([("o", "B", "2020-06-01", 0, False, True)])
        visits = derive_visits(frame, "A", {"o"})
        presence = build_confirmed_presence(visits, frame, 3, [2020, 2021], "A", proficient={"o"})
        assert not presence.a.any()


class TestScaleYear:
    def test_endpoints(self):
        assert scale_year(2009, 2009, 2024) == -0.5
        assert scale_year(2024, 2009, 2024) == 0.5

    def test_hand_value(self):
        assert scale_year(2012, 2009, 2024) == pytest.approx(3 / 15 - 0.5)

    def test_contract(self):
        with pytest.raises(ContractError):
            scale_year(2030, 2009, 2024)
        with pytest.raises(ContractError):
            scale_year(2009, 2009, 2009)

    def test_single_year(self):
        assert scale_years([2020]).tolist() == [0.0]


class TestCovariates:
    def test_zero_row_and_tolerance(self, grid):
        text = "site_id,elev,forest\n0,0,0\n1,1.0000000002,0.5\n"
        sites = load_site_covariates(read_text(text), grid)
        assert sites.S == 2
        assert sites.X[0].tolist() == [0.0, 0.0]
        assert sites.X[1, 0] == 1.0

    def test_out_of_range_is_fatal(self, grid):
        with pytest.raises(IngestError) as info:
            load_site_covariates(read_text("site_id,elev\n0,0.5\n1,1.5\n"), grid, source="cov.csv")
        assert info.value.line == 3

    def test_missing_site_row(self, grid):
        with pytest.raises(IngestError):
            load_site_covariates(read_text("site_id,elev\n0,0.5\n"), grid, expected_cells=[0, 1])

    def test_empty_file(self, grid):
        with pytest.raises(IngestError) as info:
            load_site_covariates(read_text(""), grid, source="cov.csv")
        assert "cov.csv:1" in str(info.value)

    def test_duplicate_site(self, grid):
        with pytest.raises(IngestError):
            load_site_covariates(read_text("site_id,elev\n0,0.5\n0,0.6\n"), grid)

    def test_dominant_landcover_excluded(self, grid):
        text = "site_id,forest,urban,elev,region\n3,0.7,0.3,0.1,north\n1,0.6,0.4,0.9,south\n"
        options = CovariateOptions(landcover=("forest", "urban"), ranges={"elev": (0.0, 700.0)})
        sites = load_site_covariates(read_text(text), grid, options)
        assert sites.dominant_name == "forest"
        assert sites.covariate_names == ["urban", "elev"]
        assert sites.cell_id.tolist() == [1, 3]
        assert sites.dominant.tolist() == [0.6, 0.7]
        assert sites.region.tolist() == ["south", "north"]
        assert sites.covariate_kind("urban") == "landcover"
        assert sites.covariate_kind("elev") == "topographic"

    def test_unknown_landcover(self, grid):
        with pytest.raises(ConfigError):
            load_site_covariates(read_text("site_id,elev\n0,0.5\n"), grid, CovariateOptions(landcover=("forest",)))


class TestPrepareDataset:
    def test_end_to_end(self, tmp_path):
        grid = GridSpec(ncols=3, nrows=1)
        window = StudyWindow(start=datetime.date(2020, 1, 1), end=datetime.date(2021, 12, 31))
        text = SIGHTINGS_CSV + "dave,A,2019-01-01,500,500,0,1\nerin,A,2020-01-01,99999,500,0,1\nbad,A,nope,1,1,0,1\n"
        prepared, report, errors = prepare_dataset(
            read_text(text), grid=grid, window=window, focal_species="A", threshold=1, anonymise=False
        )
        assert len(errors) == 1
        assert report.outside_window == 1
        assert report.outside_grid == 1
        assert report.sites == 3
        # alice 一次访问（3 种），bob 一次，carol 一次
        assert len(prepared.visits) == 3
        alice = prepared.visits[prepared.visits["observer"] == "alice"].iloc[0]
        assert alice["ll_class"] == "L2_3"
        assert alice["y"] == 1
        assert prepared.presence.a.tolist() == [[1, 0], [0, 0], [0, 1]]

        prepared.save(tmp_path)
        loaded = PreparedData.load(tmp_path)
        assert loaded.years == [2020, 2021]
        assert loaded.presence.a.tolist() == prepared.presence.a.tolist()
        assert loaded.visits["site"].tolist() == prepared.visits["site"].tolist()
        assert loaded.focal_species == "A"

    def test_missing_focal_species(self, grid, window):
        with pytest.raises(ConfigError):
            prepare_dataset(read_text(SIGHTINGS_CSV), grid=grid, window=window, focal_species="")

    def test_load_missing(self, tmp_path):
        with pytest.raises(IngestError):
            PreparedData.load(tmp_path / "nothing")

    def test_no_proficient_observers(self, grid, window):
        with pytest.raises(ConfigError):
            prepare_dataset(read_text(SIGHTINGS_CSV), grid=grid, window=window, focal_species="A", threshold=500)

    def test_presence_array_shape(self):
        grid = GridSpec(ncols=3, nrows=1)
        window = StudyWindow(start=datetime.date(2020, 1, 1), end=datetime.date(2022, 12, 31))
        prepared, _, _ = prepare_dataset(read_text(SIGHTINGS_CSV), grid=grid, window=window, focal_species="A", threshold=1)
        assert prepared.presence.a.shape == (3, 3)
        assert np.issubdtype(prepared.presence.a.dtype, np.integer)

    @pytest.mark.parametrize("any_stage", [True, False])
    def test_presence_matches_record_by_record(self, any_stage):
        grid = GridSpec(ncols=3, nrows=1)
        window = StudyWindow(start=datetime.date(2020, 1, 1), end=datetime.date(2021, 12, 31))
        text = SIGHTINGS_CSV + (
            "alice,A,2021-08-01,1500,500,0,0\n"
            "dan,A,2021-05-01,1500,500,0,1\n"
            "erin,A,2020-09-09,2500,500,0,1\n"
            "erin,B,2020-09-09,2500,500,0,1\n"
            "erin,C,2021-03-03,500,500,0,1\n"
        )
        extra = "site_id,year\n1,2020\n2,2019\n7,2021\n"
        prepared, _, _ = prepare_dataset(
            read_text(text),
            grid=grid,
            window=window,
            focal_species="A",
            threshold=3,
            extra_presence_src=read_text(extra),
            any_stage=any_stage,
            anonymise=False,
        )

        rows = pd.read_csv(read_text(text))
        counts = rows["observer"].value_counts()
        years = [2020, 2021]
        expected = np.zeros((3, 2), dtype=int)
        for _, r in rows.iterrows():
            if r["species"] != "A":
                continue
            proficient = counts[r["observer"]] >= 3
            if r["validated"] or (proficient and (any_stage or r["countable"])):
                expected[int(r["x"] // 1000), years.index(int(r["date"][:4]))] = 1
        for _, r in pd.read_csv(read_text(extra)).iterrows():
            if r["site_id"] < 3 and r["year"] in years:
                expected[r["site_id"], years.index(r["year"])] = 1

        assert prepared.presence.a.tolist() == expected.tolist()
        # alice 的不可计数记录只在 any_stage 下算作出现
        assert expected[1, 1] == int(any_stage)
