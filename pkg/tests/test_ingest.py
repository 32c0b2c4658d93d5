import io
import json
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings, strategies as st

from driftwatch import ingest


def make_record(sensor="S1", ts="2019-06-01T00:00:00Z", a=10.0, b=11.0,
                rh=50.0, temp=20.0, atm_a=None, atm_b=None):
    return ingest.RawRecord(
        sensor_id=sensor,
        timestamp=ingest.parse_timestamp_utc(ts),
        pm25_cf1_a=a,
        pm25_cf1_b=b,
        pm25_atm_a=atm_a,
        pm25_atm_b=atm_b,
        rh=rh,
        temp=temp,
    )


RAW_HEADER = "sensor_id,timestamp,pm25_cf1_a,pm25_cf1_b,pm25_atm_a,pm25_atm_b,temp,rh\n"


class TestParseRaw:
    def test_fahrenheit_conversion(self):
        src = io.StringIO(RAW_HEADER + "S1,2019-06-01T00:15:00Z,10,11,9,10,77,50\n")
        records, report = ingest.parse_raw(src, ingest.RawSchema(temp_unit="F"))
        assert len(records) == 1
        assert records[0].temp == pytest.approx(25.0)
        assert report.rows_parsed == 1

    def test_empty_channel_is_missing(self):
        src = io.StringIO(RAW_HEADER + "S1,2019-06-01T00:15:00Z,10,,9,10,20,50\n")
        records, _ = ingest.parse_raw(src)
        assert records[0].pm25_cf1_b is None
        assert records[0].pm25_cf1_a == 10.0

    def test_timestamp_roundtrip_bit_exact(self):
        stamp = "2019-06-01T00:15:00Z"
        src = io.StringIO(RAW_HEADER + f"S1,{stamp},10,11,9,10,20,50\n")
        records, _ = ingest.parse_raw(src)
        assert ingest.format_timestamp_utc(records[0].timestamp) == stamp

    def test_offset_timestamp_normalized_to_utc(self):
        src = io.StringIO(RAW_HEADER + "S1,2019-06-01T02:15:00+02:00,10,11,9,10,20,50\n")
        records, _ = ingest.parse_raw(src)
        assert records[0].timestamp == datetime(2019, 6, 1, 0, 15, tzinfo=timezone.utc)

    def test_negative_concentration_rejected_at_parse(self):
        src = io.StringIO(
            RAW_HEADER
            + "S1,2019-06-01T00:15:00Z,-3,11,9,10,20,50\n"
            + "S1,2019-06-01T00:30:00Z,3,11,9,10,20,50\n"
        )
        records, report = ingest.parse_raw(src)
        assert len(records) == 1
        assert report.negative_concentration == 1
        assert report.bad_rows == 1

    def test_unparseable_rows_counted_not_silently_dropped(self):
        src = io.StringIO(
            RAW_HEADER
            + "S1,not-a-date,10,11,9,10,20,50\n"
            + "S1,2019-06-01T00:30:00Z,ten,11,9,10,20,50\n"
            + "S1,2019-06-01T00:45:00Z,10,11,9,10,20,50\n"
        )
        records, report = ingest.parse_raw(src)
        assert len(records) == 1
        assert report.rows_read == 3
        assert report.bad_rows == 2
        assert report.bad_timestamp == 1

    def test_missing_column_fatal_with_name(self):
        src = io.StringIO("sensor_id,timestamp,pm25_cf1_a\nS1,2019-06-01T00:15:00Z,10\n")
        with pytest.raises(ingest.SchemaError, match="pm25_cf1_b"):
            ingest.parse_raw(src)

    def test_unreadable_source_fatal(self):
        with pytest.raises(OSError):
            ingest.parse_raw("/nonexistent/raw.csv")


class TestQcFilter:
    def test_both_channels_over_limit_rejected(self):
        recs = [make_record(a=1600.0, b=1550.0)]
        retained, report = ingest.qc_filter(recs)
        assert retained == []
        assert report.both_over_1500 == 1

    def test_single_channel_over_limit_retained(self):
        recs = [make_record(a=1600.0, b=100.0)]
        retained, report = ingest.qc_filter(recs)
        assert len(retained) == 1

    def test_exactly_1500_both_retained(self):
        retained, _ = ingest.qc_filter([make_record(a=1500.0, b=1500.0)])
        assert len(retained) == 1  # the rule is strictly greater-than

    def test_rh_boundary(self):
        ok, _ = ingest.qc_filter([make_record(rh=99.0)])
        assert len(ok) == 1
        bad, report = ingest.qc_filter([make_record(rh=99.5)])
        assert bad == [] and report.rh_over_99 == 1

    def test_temp_boundaries_inclusive_rejection(self):
        for temp in (-50.0, 100.0, -60.0, 120.0):
            retained, report = ingest.qc_filter([make_record(temp=temp)])
            assert retained == [], temp
            assert report.temp_out_of_range == 1
        retained, _ = ingest.qc_filter([make_record(temp=-49.9)])
        assert len(retained) == 1

    def test_missing_both_pm_rejected_one_retained(self):
        both_missing = make_record(a=None, b=None)
        one_missing = make_record(a=None, b=5.0)
        retained, report = ingest.qc_filter([both_missing, one_missing])
        assert len(retained) == 1
        assert report.missing_pm == 1

    def test_missing_met_rejected(self):
        retained, report = ingest.qc_filter([make_record(rh=None), make_record(temp=None)])
        assert retained == []
        assert report.missing_met == 2

    def test_first_matching_rule_attribution(self):
        # missing met AND extreme temp: attributed to the earlier rule
        rec = make_record(rh=None, temp=150.0)
        _, report = ingest.qc_filter([rec])
        assert report.missing_met == 1
        assert report.temp_out_of_range == 0

    def test_counts_partition_input(self):
        recs = [
            make_record(a=1600.0, b=1550.0),
            make_record(rh=None),
            make_record(temp=-50.0),
            make_record(rh=99.5),
            make_record(a=None, b=None),
            make_record(),
        ]
        retained, report = ingest.qc_filter(recs)
        assert report.total == len(recs)
        assert report.retained == len(retained) == 1

    def test_idempotent(self):
        recs = [make_record(a=1600.0, b=1550.0), make_record(), make_record(rh=99.5)]
        once, report1 = ingest.qc_filter(recs)
        twice, report2 = ingest.qc_filter(once)
        assert twice == once
        assert report2.retained == len(once)
        assert report2.total - report2.retained == 0


class TestAggregateHourly:
    def _hour_records(self, a_values, b_values=None, sensor="S1", base="2019-06-01T00:00:00Z"):
        base_ts = ingest.parse_timestamp_utc(base)
        records = []
        for i, a in enumerate(a_values):
            b = b_values[i] if b_values is not None else (a + 1 if a is not None else None)
            records.append(
                ingest.RawRecord(
                    sensor_id=sensor,
                    timestamp=base_ts + timedelta(minutes=15 * i),
                    pm25_cf1_a=a,
                    pm25_cf1_b=b,
                    rh=50.0,
                    temp=20.0,
                )
            )
        return records

    def test_channel_mean(self):
        hourly = ingest.aggregate_hourly(self._hour_records([2, 4, 6, 8]))
        assert len(hourly) == 1
        assert hourly[0].pm25_cf1_a == pytest.approx(5.0)
        assert hourly[0].n_subhourly == 4

    def test_two_records_hour_omitted(self):
        assert ingest.aggregate_hourly(self._hour_records([2, 4])) == []

    def test_three_records_hour_kept(self):
        hourly = ingest.aggregate_hourly(self._hour_records([2, 4, 6]))
        assert len(hourly) == 1
        assert hourly[0].n_subhourly == 3

    def test_combined_mean_is_midpoint(self):
        records = self._hour_records([10, 10, 10], [14, 14, 14])
        hourly = ingest.aggregate_hourly(records)
        assert hourly[0].pm25_cf1_mean == pytest.approx(12.0)
        assert hourly[0].pm25_cf1_mean == pytest.approx(
            (hourly[0].pm25_cf1_a + hourly[0].pm25_cf1_b) / 2
        )

    def test_completeness_judged_on_channel_a(self):
        # 4 records but only 2 have channel A: hour omitted
        records = self._hour_records([2, None, None, 8], [1, 1, 1, 1])
        assert ingest.aggregate_hourly(records) == []

    def test_missing_b_hour_still_emitted(self):
        records = self._hour_records([2, 4, 6], [None, None, None])
        hourly = ingest.aggregate_hourly(records)
        assert hourly[0].pm25_cf1_b is None
        assert hourly[0].pm25_cf1_mean == pytest.approx(4.0)

    def test_means_within_subhourly_envelope(self):
        records = self._hour_records([1, 5, 9, 3])
        h = ingest.aggregate_hourly(records)[0]
        assert 1 <= h.pm25_cf1_a <= 9
        assert 2 <= h.pm25_cf1_b <= 10
        assert h.n_subhourly in (3, 4)

    def test_permutation_invariance(self):
        records = self._hour_records([2, 4, 6, 8]) + self._hour_records(
            [1, 2, 3], base="2019-06-01T03:00:00Z"
        )
        forward = ingest.aggregate_hourly(records)
        backward = ingest.aggregate_hourly(list(reversed(records)))
        assert forward == backward

    def test_groups_by_sensor(self):
        records = self._hour_records([2, 4, 6], sensor="A") + self._hour_records(
            [1, 2, 3], sensor="B"
        )
        hourly = ingest.aggregate_hourly(records)
        assert [h.sensor_id for h in hourly] == ["A", "B"]


def _hourly_series(sensor, n, start="2019-06-01T00:00:00Z"):
    t0 = ingest.parse_timestamp_utc(start)
    return [
        ingest.HourlyRecord(
            sensor_id=sensor,
            hour=t0 + timedelta(hours=i),
            pm25_cf1_mean=10.0,
            pm25_cf1_a=10.0,
            pm25_cf1_b=10.0,
            pm25_atm_mean=10.0,
            rh_mean=50.0,
            temp_mean=20.0,
            n_subhourly=4,
        )
        for i in range(n)
    ]


class TestTrimBurnIn:
    def test_basic_count(self):
        assert len(ingest.trim_burn_in(_hourly_series("S1", 25), 20)) == 5

    def test_zero_is_identity(self):
        series = _hourly_series("S1", 7)
        assert ingest.trim_burn_in(series, 0) == series

    def test_short_series_goes_empty(self):
        assert ingest.trim_burn_in(_hourly_series("S1", 10), 20) == []

    @given(st.integers(0, 30), st.integers(0, 30))
    @settings(max_examples=25, deadline=None)
    def test_composition(self, a, b):
        series = _hourly_series("S1", 40)
        combined = ingest.trim_burn_in(series, a + b)
        stepped = ingest.trim_burn_in(ingest.trim_burn_in(series, a), b)
        assert combined == stepped

    def test_per_sensor(self):
        series = _hourly_series("A", 25) + _hourly_series("B", 21)
        trimmed = ingest.trim_burn_in(series, 20)
        counts = {}
        for rec in trimmed:
            counts[rec.sensor_id] = counts.get(rec.sensor_id, 0) + 1
        assert counts == {"A": 5, "B": 1}


class TestClimateZones:
    def _meta(self, lat, lon, sensor="S1"):
        return ingest.SensorMeta(sensor_id=sensor, latitude=lat, longitude=lon, location="outside")

    def _zone_file(self, tmp_path, features):
        doc = {"type": "FeatureCollection", "features": features}
        path = tmp_path / "zones.geojson"
        path.write_text(json.dumps(doc))
        return path

    @staticmethod
    def _rect(zone, lon0, lon1, lat0, lat1):
        return {
            "type": "Feature",
            "properties": {"zone": zone},
            "geometry": {
                "type": "Polygon",
                "coordinates": [[
                    [lon0, lat0], [lon1, lat0], [lon1, lat1], [lon0, lat1], [lon0, lat0]
                ]],
            },
        }

    def test_point_inside_polygon(self, tmp_path):
        path = self._zone_file(tmp_path, [self._rect("Hot-Dry", -120, -100, 30, 40)])
        zones = ingest.load_zone_polygons(path)
        meta = ingest.assign_climate_zone(self._meta(35.0, -110.0), zones)
        assert meta.climate_zone == "Hot-Dry"

    def test_point_outside_all(self, tmp_path):
        path = self._zone_file(tmp_path, [self._rect("Hot-Dry", -120, -100, 30, 40)])
        zones = ingest.load_zone_polygons(path)
        meta = ingest.assign_climate_zone(self._meta(50.0, -80.0), zones)
        assert meta.climate_zone == "Unknown"

    def test_shared_boundary_first_match_in_file_order(self, tmp_path):
        # Two rectangles sharing the lon=-100 edge. Oracle: a direct
        # containment check says the boundary point lies in both; the
        # assignment must pick whichever comes first in the file.
        left = self._rect("Hot-Dry", -120, -100, 30, 40)
        right = self._rect("Cold", -100, -80, 30, 40)
        point = self._meta(35.0, -100.0)

        from shapely.geometry import Point

        zones_lr = ingest.load_zone_polygons(self._zone_file(tmp_path, [left, right]))
        assert all(poly.covers(Point(-100.0, 35.0)) for _, poly in zones_lr)
        assert ingest.assign_climate_zone(point, zones_lr).climate_zone == "Hot-Dry"

        zones_rl = ingest.load_zone_polygons(self._zone_file(tmp_path, [right, left]))
        assert ingest.assign_climate_zone(point, zones_rl).climate_zone == "Cold"

    def test_table_lookup(self):
        meta = ingest.assign_climate_zone(self._meta(0, 0), {"S1": "Marine"})
        assert meta.climate_zone == "Marine"
        meta2 = ingest.assign_climate_zone(self._meta(0, 0, sensor="S2"), {"S1": "Marine"})
        assert meta2.climate_zone == "Unknown"

    def test_malformed_zone_file_fatal(self, tmp_path):
        path = tmp_path / "zones.geojson"
        path.write_text(json.dumps({"type": "NotACollection"}))
        with pytest.raises(ingest.SchemaError):
            ingest.load_zone_polygons(path)

    def test_unknown_zone_label_fatal(self, tmp_path):
        path = self._zone_file(tmp_path, [self._rect("Tropical", -120, -100, 30, 40)])
        with pytest.raises(ingest.SchemaError, match="Tropical"):
            ingest.load_zone_polygons(path)


class TestHourlyIo:
    def test_csv_roundtrip(self, tmp_path):
        series = _hourly_series("S1", 3)
        path = tmp_path / "hourly.csv"
        ingest.write_hourly_csv(series, path)
        df = ingest.read_hourly_csv(path)
        assert len(df) == 3
        assert df["hour"].iloc[0] == series[0].hour
        assert df["pm25_cf1_mean"].iloc[0] == 10.0

    def test_deploy_starts(self):
        records = [
            make_record(ts="2019-06-01T05:00:00Z"),
            make_record(ts="2019-06-01T03:00:00Z"),
            make_record(sensor="S2", ts="2019-07-01T00:00:00Z"),
        ]
        starts = ingest.deploy_starts(records)
        assert starts["S1"] == ingest.parse_timestamp_utc("2019-06-01T03:00:00Z")
        assert starts["S2"] == ingest.parse_timestamp_utc("2019-07-01T00:00:00Z")
