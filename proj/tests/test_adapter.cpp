#include <gtest/gtest.h>

#include "safm/adapter.hpp"

namespace safm {
namespace {

constexpr int kD = 32, kM = 8;

TensorPtr random_input(Rng& rng, int batch = 2, int seq = 3) {
  auto x = Tensor::create({batch, seq, kD});
  for (auto& v : x->values) v = rng.normal();
  return x;
}

TEST(Adapter, ParamCountFormula) {
  EXPECT_EQ(Adapter::param_count(32, 8), 552);
  AdapterStore store(kD, kM);
  Rng rng(1);
  auto id = store.new_adapter(1, 1, rng);
  long long n = 0;
  for (const auto& p : store.get(id).parameters()) n += p->size();
  EXPECT_EQ(n, 552);
}

TEST(Adapter, FreshAdapterIsIdentityAtInit) {
  AdapterStore store(kD, kM);
  Rng rng(2);
  auto id = store.new_adapter(1, 1, rng);
  auto x = random_input(rng);
  auto out = store.apply_adapter(id, x);
  EXPECT_EQ(out->values, x->values);  // zero up-projection: exact pass-through
}

TEST(Adapter, EmptyIsBitIdentical) {
  AdapterStore store(kD, kM);
  Rng rng(3);
  auto x = random_input(rng);
  auto out = store.apply_adapter(std::nullopt, x);
  EXPECT_EQ(out.get(), x.get());
}

TEST(Adapter, DistinctIds) {
  AdapterStore store(kD, kM);
  Rng rng(4);
  auto a = store.new_adapter(1, 1, rng);
  auto b = store.new_adapter(1, 1, rng);
  EXPECT_NE(a.value, b.value);
  EXPECT_EQ(store.num_adapters(), 2u);
}

TEST(Adapter, UnknownIdThrows) {
  AdapterStore store(kD, kM);
  Rng rng(5);
  auto x = random_input(rng);
  EXPECT_THROW(store.apply_adapter(AdapterId{7}, x), std::out_of_range);
  EXPECT_THROW(store.get(AdapterId{7}), std::out_of_range);
  EXPECT_THROW(store.remove(AdapterId{7}), std::out_of_range);
}

TEST(Adapter, WeightGradientsMatchFiniteDifferences) {
  AdapterStore store(kD, kM);
  Rng rng(6);
  auto id = store.new_adapter(1, 1, rng);
  auto& a = store.get(id);
  for (auto& v : a.w_up->values) v = rng.normal(0.0, 0.1);
  auto x = random_input(rng, 1, 2);
  for (const auto& w : {a.w_down, a.w_up, a.b_down, a.b_up}) {
    auto f = [&] { return sum_all(mul(store.apply_adapter(id, x), store.apply_adapter(id, x))); };
    EXPECT_LE(finite_difference_check(f, w, 1e-5), 1e-4);
  }
}

TEST(UniqueAdapters, FirstTaskEmpty) {
  EXPECT_TRUE(AdapterStore::unique_adapters_at_layer(1, {}).empty());
}

TEST(UniqueAdapters, DedupInFirstUseOrder) {
  Route r1{1, {AdapterId{1}}};
  Route r2{2, {AdapterId{1}}};
  Route r3{3, {AdapterId{2}}};
  auto mu = AdapterStore::unique_adapters_at_layer(1, {r1, r2, r3});
  ASSERT_EQ(mu.size(), 2u);
  EXPECT_EQ(mu[0].value, 1);
  EXPECT_EQ(mu[1].value, 2);
}

TEST(UniqueAdapters, EmptyNeverAMember) {
  Route r1{1, {std::nullopt}};
  Route r2{2, {AdapterId{1}}};
  auto mu = AdapterStore::unique_adapters_at_layer(1, {r1, r2});
  ASSERT_EQ(mu.size(), 1u);
  EXPECT_EQ(mu[0].value, 1);
}

TEST(ParamAccounting, DistinctAdapters) {
  AdapterStore store(kD, kM);
  Rng rng(7);
  Route r1{1, {}}, r2{2, {}};
  for (int l = 1; l <= 4; ++l) r1.entries.push_back(store.new_adapter(l, 1, rng));
  for (int l = 1; l <= 4; ++l) r2.entries.push_back(store.new_adapter(l, 2, rng));
  EXPECT_EQ(store.count_learnable_params({r1, r2}), 8 * 552);
}

TEST(ParamAccounting, FullReuseCountsOnce) {
  AdapterStore store(kD, kM);
  Rng rng(8);
  Route r1{1, {}};
  for (int l = 1; l <= 4; ++l) r1.entries.push_back(store.new_adapter(l, 1, rng));
  Route r2 = r1;
  r2.task = 2;
  EXPECT_EQ(store.count_learnable_params({r1, r2}), 4 * 552);
}

TEST(ParamAccounting, EmptyRouteContributesNothing) {
  AdapterStore store(kD, kM);
  Route r{1, {std::nullopt, std::nullopt, std::nullopt, std::nullopt}};
  EXPECT_EQ(store.count_learnable_params({r}), 0);
  EXPECT_EQ(store.count_learnable_params({r}, 1000), 1000);
}

TEST(ParamAccounting, MonotoneAsTasksAdd) {
  AdapterStore store(kD, kM);
  Rng rng(9);
  std::vector<Route> routes;
  long long prev = 0;
  for (int t = 1; t <= 3; ++t) {
    Route r{t, {}};
    // alternate fresh and reused entries
    r.entries.push_back(t == 1 ? RouteEntry{store.new_adapter(1, t, rng)}
                               : routes.front().entries[0]);
    r.entries.push_back(store.new_adapter(2, t, rng));
    routes.push_back(r);
    long long now = store.count_learnable_params(routes);
    EXPECT_GE(now, prev);
    prev = now;
  }
}

TEST(Sharing, MutatingSharedAdapterChangesEveryRoutedTask) {
  AdapterStore store(kD, kM);
  Rng rng(10);
  auto shared = store.new_adapter(1, 1, rng);
  auto& a = store.get(shared);
  for (auto& v : a.w_up->values) v = rng.normal(0.0, 0.1);
  auto x = Tensor::create({1, 1, kD});
  for (auto& v : x->values) v = rng.normal();
  auto before = store.apply_adapter(shared, x)->values;
  a.b_up->values[0] += 0.5;
  auto after = store.apply_adapter(shared, x)->values;
  EXPECT_NE(before, after);  // both task 1 and task 2 route through `shared`
}

TEST(Routes, RegistrationValidatesIds) {
  AdapterStore store(kD, kM);
  Rng rng(11);
  auto id = store.new_adapter(1, 1, rng);
  store.register_route({1, {id}});
  EXPECT_TRUE(store.has_route(1));
  EXPECT_FALSE(store.has_route(2));
  EXPECT_EQ(store.route_for_task(1).entries[0]->value, id.value);
  EXPECT_THROW(store.register_route({2, {AdapterId{42}}}), std::out_of_range);
  EXPECT_THROW(store.route_for_task(9), std::out_of_range);
}

TEST(Routes, SharesAdapterWith) {
  Route a{1, {AdapterId{1}, std::nullopt}};
  Route b{2, {std::nullopt, AdapterId{1}}};
  Route c{3, {std::nullopt, AdapterId{2}}};
  EXPECT_TRUE(a.shares_adapter_with(b));
  EXPECT_FALSE(a.shares_adapter_with(c));
  Route d{4, {std::nullopt, std::nullopt}};
  EXPECT_FALSE(d.shares_adapter_with(d));  // empties never count as shared
}

TEST(Restore, RoundTripsIdsAndRoutes) {
  AdapterStore store(kD, kM);
  Rng rng(12);
  auto a = store.new_adapter(1, 1, rng);
  auto b = store.new_adapter(2, 1, rng);
  store.remove(b);
  store.register_route({1, {a, std::nullopt}});
  auto copy = AdapterStore::restore(kD, kM, store.next_id(),
                                    std::map<int, Adapter>(store.adapters()), store.routes());
  EXPECT_EQ(copy.next_id(), store.next_id());
  Rng rng2(13);
  auto c = copy.new_adapter(3, 2, rng2);
  EXPECT_EQ(c.value, 2);  // removed ids are never reissued
  EXPECT_THROW(AdapterStore::restore(kD, kM, 0, std::map<int, Adapter>(store.adapters()), {}),
               std::invalid_argument);
}

}  // namespace
}  // namespace safm
