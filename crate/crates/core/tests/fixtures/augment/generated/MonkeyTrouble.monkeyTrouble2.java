/*
 * This file was automatically generated by EvoSuite
 */

package codingbat;

import org.junit.Test;
import static org.junit.Assert.*;
import org.evosuite.runtime.EvoRunner;
import org.evosuite.runtime.EvoRunnerParameters;
import org.junit.runner.RunWith;

@RunWith(EvoRunner.class) @EvoRunnerParameters(mockJVMNonDeterminism = true, useVFS = true)
public class MonkeyTrouble_ESTest extends MonkeyTrouble_ESTest_scaffolding {

  @Test(timeout = 4000)
  public void test0()  throws Throwable  {
      String string0 = MonkeyTrouble.monkeyTrouble2(false, false);
      assertEquals("Yes", string0);
  }

  @Test(timeout = 4000)
  public void test1()  throws Throwable  {
      String string0 = MonkeyTrouble.monkeyTrouble2(true, true);
      assertEquals("Yes", string0);
  }

  @Test(timeout = 4000)
  public void test2()  throws Throwable  {
      String string0 = MonkeyTrouble.monkeyTrouble2(true, false);
      assertEquals("No", string0);
  }

  @Test(timeout = 4000)
  public void test3()  throws Throwable  {
      String string0 = MonkeyTrouble.monkeyTrouble2(false, true);
      assertEquals("No", string0);
  }

  @Test(timeout = 4000)
  public void test4()  throws Throwable  {
      MonkeyTrouble monkeyTrouble0 = new MonkeyTrouble();
      assertNotNull(monkeyTrouble0);
  }
}
