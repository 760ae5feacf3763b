#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "mars/data.hpp"

namespace mars {
namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("mars_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

Image random_rgb(int w, int h, std::uint64_t seed) {
  auto rng = seeded_rng(seed, "data.random_rgb");
  Image img(w, h);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  return img;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
}

std::string voc_xml(const std::string& filename, int w, int h,
                    const std::vector<std::tuple<std::string, int, int, int, int>>& objects) {
  std::string s = "<annotation><filename>" + filename + "</filename><size><width>" +
                  std::to_string(w) + "</width><height>" + std::to_string(h) +
                  "</height></size>";
  for (const auto& [cls, x0, y0, x1, y1] : objects)
    s += "<object><name>" + cls + "</name><bndbox><xmin>" + std::to_string(x0) +
         "</xmin><ymin>" + std::to_string(y0) + "</ymin><xmax>" + std::to_string(x1) +
         "</xmax><ymax>" + std::to_string(y1) + "</ymax></bndbox></object>";
  return s + "</annotation>";
}

TEST(Ppm, RoundTripsAndRejectsMalformedFiles) {
  TempDir dir;
  const Image img = random_rgb(13, 7, 1);
  write_ppm(img, dir.file("a.ppm"));
  const Image back = read_ppm(dir.file("a.ppm"));
  EXPECT_EQ(back.width, 13);
  EXPECT_EQ(back.height, 7);
  EXPECT_EQ(back.pixels, img.pixels);

  EXPECT_THROW(read_ppm(dir.file("missing.ppm")), IoError);
  write_text(dir.file("bad_magic.ppm"), "P5\n2 2\n255\nxxxx");
  EXPECT_THROW(read_ppm(dir.file("bad_magic.ppm")), IoError);
  write_text(dir.file("truncated.ppm"), "P6\n4 4\n255\nshort");
  EXPECT_THROW(read_ppm(dir.file("truncated.ppm")), IoError);
  write_text(dir.file("maxval.ppm"), "P6\n1 1\n65535\naaaaaa");
  EXPECT_THROW(read_ppm(dir.file("maxval.ppm")), IoError);

  // Comments between header tokens are legal PPM.
  std::ofstream out(dir.file("comment.ppm"), std::ios::binary);
  out << "P6\n# a comment\n2 # inline\n1\n255\n";
  const char raster[] = {1, 2, 3, 4, 5, 6};
  out.write(raster, 6);
  out.close();
  const Image c = read_ppm(dir.file("comment.ppm"));
  EXPECT_EQ(c.width, 2);
  EXPECT_EQ(c.height, 1);
  EXPECT_EQ(c.at(1, 0, 2), 6);
}

TEST(Ppm, ToTensorScalesIntoUnitRange) {
  Image img(2, 1);
  img.at(0, 0, 0) = 0;
  img.at(0, 0, 1) = 128;
  img.at(0, 0, 2) = 255;
  img.at(1, 0, 0) = 51;
  const Tensor t = to_tensor(img);
  ASSERT_EQ(t.rank(), 3);
  EXPECT_EQ(t.dim(0), 3);
  EXPECT_EQ(t.dim(1), 1);
  EXPECT_EQ(t.dim(2), 2);
  EXPECT_DOUBLE_EQ(t(0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(t(1, 0, 0), 128 / 255.0);
  EXPECT_DOUBLE_EQ(t(2, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t(0, 0, 1), 0.2);
}

TEST(Letterbox, SquareInputAtTargetSizeIsIdentity) {
  const Image img = random_rgb(416, 416, 2);
  auto [out, tf] = letterbox(img, 416);
  EXPECT_DOUBLE_EQ(tf.scale, 1.0);
  EXPECT_DOUBLE_EQ(tf.pad_x, 0.0);
  EXPECT_DOUBLE_EQ(tf.pad_y, 0.0);
  EXPECT_EQ(out.pixels, img.pixels);
}

TEST(Letterbox, WideImageGetsHalfScaleAndCenteredPad) {
  Image img(832, 416, {200, 60, 30});
  auto [out, tf] = letterbox(img, 416);
  EXPECT_DOUBLE_EQ(tf.scale, 0.5);
  EXPECT_DOUBLE_EQ(tf.pad_x, 0.0);
  EXPECT_DOUBLE_EQ(tf.pad_y, 104.0);
  ASSERT_EQ(out.width, 416);
  ASSERT_EQ(out.height, 416);
  EXPECT_EQ(out.at(200, 50, 0), 128);   // top pad band is canvas gray
  EXPECT_EQ(out.at(200, 350, 0), 128);  // bottom pad band
  EXPECT_EQ(out.at(200, 208, 0), 200);  // content region keeps source color
  EXPECT_EQ(out.at(200, 208, 2), 30);
}

TEST(Letterbox, BoxRoundTripStaysWithinHalfPixel) {
  auto rng = seeded_rng(3, "letterbox.roundtrip");
  std::uniform_int_distribution<int> dim(1, 64);
  std::uniform_real_distribution<real> unit(0.0, 1.0);
  for (int n = 0; n < 1000; ++n) {
    const int w = dim(rng), h = dim(rng);
    auto [out, tf] = letterbox(random_rgb(w, h, 1000 + n), 416);
    (void)out;
    const real x0 = unit(rng) * w, y0 = unit(rng) * h;
    EXPECT_LT(std::abs(tf.inv_x(tf.fwd_x(x0)) - x0), 0.5);
    EXPECT_LT(std::abs(tf.inv_y(tf.fwd_y(y0)) - y0), 0.5);
    // Forward-mapped coordinates always land on the canvas.
    EXPECT_GE(tf.fwd_x(x0), -1e-9);
    EXPECT_LE(tf.fwd_x(x0), 416 + 1e-9);
  }
}

TEST(Augmentation, DomainZeroIsIdentity) {
  const Image img = random_rgb(24, 16, 4);
  const Image out = apply_domain_augmentation(img, 0, 1.0, 99);
  EXPECT_EQ(out.pixels, img.pixels);
}

TEST(Augmentation, DeterministicPerTripleAndSeedSensitiveNoise) {
  const Image img = random_rgb(24, 16, 5);
  for (int d = 1; d < 7; ++d) {
    const Image a = apply_domain_augmentation(img, d, 0.8, 42);
    const Image b = apply_domain_augmentation(img, d, 0.8, 42);
    EXPECT_EQ(a.pixels, b.pixels) << "domain " << d;
    EXPECT_EQ(a.width, img.width);
    EXPECT_EQ(a.height, img.height);
  }
  const Image n1 = apply_domain_augmentation(img, 6, 0.8, 42);
  const Image n2 = apply_domain_augmentation(img, 6, 0.8, 43);
  EXPECT_NE(n1.pixels, n2.pixels);
}

TEST(Augmentation, ContrastReductionPullsValuesTowardTheMean) {
  Image img(8, 8);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = (i % 2 == 0) ? 0 : 255;  // two-valued, mean 127.5
  real mean = 0;
  for (auto p : img.pixels) mean += p;
  mean /= static_cast<real>(img.pixels.size());

  const Image out = apply_domain_augmentation(img, 5, 1.0, 0);
  for (size_t i = 0; i < out.pixels.size(); ++i)
    EXPECT_LT(std::abs(out.pixels[i] - mean), std::abs(img.pixels[i] - mean)) << i;
}

TEST(Augmentation, RejectsBadDomainAndStrength) {
  const Image img = random_rgb(4, 4, 6);
  EXPECT_THROW(apply_domain_augmentation(img, 7, 0.5, 0), ConfigError);
  EXPECT_THROW(apply_domain_augmentation(img, -1, 0.5, 0), ConfigError);
  EXPECT_THROW(apply_domain_augmentation(img, 1, 1.5, 0), ConfigError);
  EXPECT_THROW(apply_domain_augmentation(img, 1, -0.1, 0), ConfigError);
}

TEST(AugmentedDataset, SevenFoldWithDomainPartitionAndUntouchedOriginals) {
  const DatasetManifest src = generate_synthetic_dataset(4, 64, 11);
  const std::vector<real> strengths(6, 0.7);
  const DatasetManifest aug = build_augmented_dataset(src, strengths, 5);

  ASSERT_EQ(aug.images.size(), 28u);
  std::map<int, int> histogram;
  for (const auto& rec : aug.images) ++histogram[rec.domain_id];
  for (int d = 0; d < 7; ++d) EXPECT_EQ(histogram[d], 4) << "domain " << d;

  for (size_t i = 0; i < src.images.size(); ++i) {
    const auto& orig = src.images[i];
    const auto& copy = aug.images[i * 7];  // records grouped per source image
    EXPECT_EQ(copy.domain_id, 0);
    EXPECT_EQ(copy.name, orig.name);
    EXPECT_EQ(copy.pixels->pixels, orig.pixels->pixels);
    ASSERT_EQ(copy.objects.size(), orig.objects.size());
    for (int d = 1; d < 7; ++d) {
      const auto& degraded = aug.images[i * 7 + static_cast<size_t>(d)];
      EXPECT_EQ(degraded.domain_id, d);
      ASSERT_EQ(degraded.objects.size(), orig.objects.size());
      for (size_t o = 0; o < orig.objects.size(); ++o) {
        EXPECT_DOUBLE_EQ(degraded.objects[o].x_min, orig.objects[o].x_min);
        EXPECT_DOUBLE_EQ(degraded.objects[o].y_max, orig.objects[o].y_max);
        EXPECT_EQ(degraded.objects[o].class_name, orig.objects[o].class_name);
      }
    }
  }
  EXPECT_THROW(build_augmented_dataset(src, {0.5, 0.5}, 5), ConfigError);
}

TEST(Synthetic, GeneratesInBoundsBoxesDeterministically) {
  const DatasetManifest a = generate_synthetic_dataset(8, 64, 7);
  ASSERT_EQ(a.images.size(), 8u);
  for (const auto& rec : a.images) {
    EXPECT_EQ(rec.width, 64);
    EXPECT_EQ(rec.height, 64);
    ASSERT_TRUE(rec.pixels);
    EXPECT_GE(rec.objects.size(), 1u);
    EXPECT_LE(rec.objects.size(), 4u);
    for (const auto& o : rec.objects) {
      EXPECT_LT(o.x_min, o.x_max);
      EXPECT_LT(o.y_min, o.y_max);
      EXPECT_GE(o.x_min, 0.0);
      EXPECT_GE(o.y_min, 0.0);
      EXPECT_LE(o.x_max, 64.0);
      EXPECT_LE(o.y_max, 64.0);
      EXPECT_GE(class_id_of(o.class_name), 0);
    }
  }

  const DatasetManifest b = generate_synthetic_dataset(8, 64, 7);
  ASSERT_EQ(b.images.size(), a.images.size());
  for (size_t i = 0; i < a.images.size(); ++i) {
    EXPECT_EQ(a.images[i].pixels->pixels, b.images[i].pixels->pixels);
    EXPECT_EQ(a.images[i].objects.size(), b.images[i].objects.size());
  }

  const DatasetManifest c = generate_synthetic_dataset(8, 64, 8);
  bool any_differs = false;
  for (size_t i = 0; i < a.images.size(); ++i)
    if (c.images[i].pixels->pixels != a.images[i].pixels->pixels) any_differs = true;
  EXPECT_TRUE(any_differs);

  EXPECT_THROW(generate_synthetic_dataset(0, 64, 1), ConfigError);
}

TEST(Synthetic, ClassHistogramCoversAllFiveClasses) {
  const DatasetManifest m = generate_synthetic_dataset(1000, 64, 3);
  std::map<std::string, int> histogram;
  for (const auto& rec : m.images)
    for (const auto& o : rec.objects) ++histogram[o.class_name];
  for (const auto& cls : kClassNames) EXPECT_GT(histogram[cls], 0) << cls;
}

TEST(VocParsing, EmptyDirectoryYieldsEmptyManifest) {
  TempDir dir;
  const DatasetManifest m = parse_voc_annotations(dir.path.string());
  EXPECT_TRUE(m.images.empty());
  EXPECT_EQ(m.classes.size(), 5u);
  EXPECT_THROW(parse_voc_annotations(dir.file("nope")), IoError);
}

TEST(VocParsing, ReadsSingleEchinusFixture) {
  TempDir dir;
  write_ppm(random_rgb(416, 416, 9), dir.file("img1.ppm"));
  write_text(dir.file("img1.xml"),
             voc_xml("img1.ppm", 416, 416, {{"echinus", 10, 20, 110, 220}}));

  const DatasetManifest m = parse_voc_annotations(dir.path.string());
  ASSERT_EQ(m.images.size(), 1u);
  const auto& rec = m.images[0];
  EXPECT_EQ(rec.name, "img1");
  EXPECT_EQ(rec.width, 416);
  EXPECT_EQ(rec.height, 416);
  EXPECT_EQ(rec.domain_id, 0);
  ASSERT_EQ(rec.objects.size(), 1u);
  EXPECT_EQ(rec.objects[0].class_name, "echinus");
  EXPECT_DOUBLE_EQ(rec.objects[0].x_min, 10.0);
  EXPECT_DOUBLE_EQ(rec.objects[0].y_min, 20.0);
  EXPECT_DOUBLE_EQ(rec.objects[0].x_max, 110.0);
  EXPECT_DOUBLE_EQ(rec.objects[0].y_max, 220.0);
}

TEST(VocParsing, RejectsUnknownClassNamingIt) {
  TempDir dir;
  write_ppm(random_rgb(32, 32, 10), dir.file("img2.ppm"));
  write_text(dir.file("img2.xml"), voc_xml("img2.ppm", 32, 32, {{"fish", 1, 1, 10, 10}}));
  try {
    parse_voc_annotations(dir.path.string());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("fish"), std::string::npos);
  }
}

TEST(VocParsing, ReportsMalformedXmlWithFileName) {
  TempDir dir;
  write_text(dir.file("broken.xml"), "<annotation><size><width>4</width>");
  try {
    parse_voc_annotations(dir.path.string());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.xml"), std::string::npos);
  }
}

TEST(VocParsing, RequiresTheReferencedImage) {
  TempDir dir;
  write_text(dir.file("img3.xml"), voc_xml("img3.ppm", 32, 32, {{"scallop", 1, 1, 10, 10}}));
  EXPECT_THROW(parse_voc_annotations(dir.path.string()), IoError);
}

TEST(VocParsing, ClampsOutOfBoundsBoxesAndDropsEmptyOnes) {
  TempDir dir;
  write_ppm(random_rgb(100, 100, 12), dir.file("img4.ppm"));
  write_text(dir.file("img4.xml"),
             voc_xml("img4.ppm", 100, 100,
                     {{"starfish", -20, 10, 50, 120},     // clamps to (0,10,50,100)
                      {"scallop", 150, 150, 220, 220}}));  // fully outside: dropped
  int dropped = 0;
  const DatasetManifest m = parse_voc_annotations(dir.path.string(), &dropped);
  ASSERT_EQ(m.images.size(), 1u);
  ASSERT_EQ(m.images[0].objects.size(), 1u);
  EXPECT_EQ(dropped, 1);
  const auto& o = m.images[0].objects[0];
  EXPECT_DOUBLE_EQ(o.x_min, 0.0);
  EXPECT_DOUBLE_EQ(o.y_min, 10.0);
  EXPECT_DOUBLE_EQ(o.x_max, 50.0);
  EXPECT_DOUBLE_EQ(o.y_max, 100.0);
}

TEST(ManifestJson, SaveLoadRoundTripsRecords) {
  TempDir dir;
  DatasetManifest m = generate_synthetic_dataset(3, 64, 21);
  for (auto& rec : m.images) {
    rec.image_path = dir.file(rec.name + ".ppm");
    write_ppm(*rec.pixels, rec.image_path);
  }
  save_manifest(m, dir.file("manifest.json"));
  const DatasetManifest back = load_manifest(dir.file("manifest.json"));

  EXPECT_EQ(back.split, "synthetic");
  EXPECT_EQ(back.classes, m.classes);
  EXPECT_EQ(back.domains, m.domains);
  ASSERT_EQ(back.images.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.images[i].name, m.images[i].name);
    EXPECT_EQ(back.images[i].domain_id, m.images[i].domain_id);
    ASSERT_EQ(back.images[i].objects.size(), m.images[i].objects.size());
    for (size_t o = 0; o < m.images[i].objects.size(); ++o) {
      EXPECT_EQ(back.images[i].objects[o].class_name, m.images[i].objects[o].class_name);
      EXPECT_DOUBLE_EQ(back.images[i].objects[o].x_min, m.images[i].objects[o].x_min);
      EXPECT_DOUBLE_EQ(back.images[i].objects[o].y_max, m.images[i].objects[o].y_max);
    }
    const Image px = load_image(back.images[i]);
    EXPECT_EQ(px.pixels, m.images[i].pixels->pixels);
  }

  EXPECT_THROW(load_manifest(dir.file("absent.json")), IoError);
  write_text(dir.file("garbage.json"), "{not json");
  EXPECT_THROW(load_manifest(dir.file("garbage.json")), DataError);
  write_text(dir.file("version.json"), R"({"version": 9, "split": "x", "classes": [],
    "domains": [], "records": []})");
  EXPECT_THROW(load_manifest(dir.file("version.json")), DataError);

  // In-memory records must be materialized before saving.
  DatasetManifest unsaved = generate_synthetic_dataset(1, 64, 22);
  EXPECT_THROW(save_manifest(unsaved, dir.file("x.json")), DataError);
}

TEST(TrainBridge, LetterboxesImageAndBoxesIntoInputSpace) {
  AnnotatedImage rec;
  rec.name = "wide";
  rec.width = 832;
  rec.height = 416;
  rec.domain_id = 3;
  rec.pixels = std::make_shared<Image>(832, 416, std::array<std::uint8_t, 3>{10, 20, 30});
  rec.objects.push_back({"holothurian", 0, 0, 832, 416});
  rec.objects.push_back({"echinus", 100, 50, 300, 200});

  const TrainExample ex = to_train_example(rec, 416);
  EXPECT_EQ(ex.name, "wide");
  EXPECT_EQ(ex.domain_id, 3);
  ASSERT_EQ(ex.image.rank(), 3);
  EXPECT_EQ(ex.image.dim(1), 416);
  ASSERT_EQ(ex.boxes.size(), 2u);
  EXPECT_EQ(ex.boxes[0].class_id, 2);
  EXPECT_DOUBLE_EQ(ex.boxes[0].x_min, 0.0);
  EXPECT_DOUBLE_EQ(ex.boxes[0].y_min, 104.0);
  EXPECT_DOUBLE_EQ(ex.boxes[0].x_max, 416.0);
  EXPECT_DOUBLE_EQ(ex.boxes[0].y_max, 312.0);
  EXPECT_EQ(ex.boxes[1].class_id, 0);
  EXPECT_DOUBLE_EQ(ex.boxes[1].x_min, 50.0);
  EXPECT_DOUBLE_EQ(ex.boxes[1].y_min, 129.0);
}

}  // namespace
}  // namespace mars
